import numpy as np
import pytest


def rel_err(a, b) -> float:
    """Norm-based relative disagreement, tolerant of near-zero pairs."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def rel_err_stack(pairs) -> float:
    va = np.concatenate([np.ravel(a) for a, _ in pairs])
    vb = np.concatenate([np.ravel(b) for _, b in pairs])
    return rel_err(va, vb)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
