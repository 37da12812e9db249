"""Comparison recurrences with forward-mode traces, and the small-matrix
complex-eigenvalue counter.

The online LRU keeps a complex diagonal state in (re, im) real arithmetic;
its recurrence is the same paired-rotation update as the linear trace unit,
so it shares that kernel, while its learned output projection takes the real
part of a complex matrix product. The block-diagonal RNN drops the rotation
constraint and learns four free scalars per 2x2 block. The dense linear RNN
has a full recurrent matrix and is trained only through the window-gradient
oracle path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import TraceStore, _as_f64
from .errors import InvalidParameterError, NumericsError, ShapeError


# ---------------------------------------------------------------------------
# Online LRU
# ---------------------------------------------------------------------------

@dataclass
class LruParams:
    """Complex-diagonal recurrence in split real/imaginary storage.

    The input matrix is complex (two real parts); the learned output matrix
    is complex as well and the layer emits Re(W_out @ h), which is where the
    extra m x n parameters relative to a trace unit live.
    """

    nu_log: np.ndarray
    theta_log: np.ndarray
    w_in_re: np.ndarray
    w_in_im: np.ndarray
    w_out_re: np.ndarray
    w_out_im: np.ndarray

    def __post_init__(self):
        for name in ("nu_log", "theta_log", "w_in_re", "w_in_im", "w_out_re", "w_out_im"):
            setattr(self, name, _as_f64(getattr(self, name)))
        n = self.nu_log.shape[0]
        if self.theta_log.shape != (n,):
            raise ShapeError("nu_log and theta_log lengths differ")
        if self.w_in_re.shape != self.w_in_im.shape or self.w_in_re.shape[0] != n:
            raise ShapeError("input matrices must both be (n, d)")
        if self.w_out_re.shape != self.w_out_im.shape or self.w_out_re.shape[1] != n:
            raise ShapeError("output matrices must both be (m, n)")

    @property
    def n(self) -> int:
        return self.nu_log.shape[0]

    @property
    def d(self) -> int:
        return self.w_in_re.shape[1]

    @property
    def m(self) -> int:
        return self.w_out_re.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"nu_log": self.nu_log, "theta_log": self.theta_log,
                "w_in_re": self.w_in_re, "w_in_im": self.w_in_im,
                "w_out_re": self.w_out_re, "w_out_im": self.w_out_im}

    def load_dict(self, values):
        for k in self.as_dict():
            setattr(self, k, _as_f64(values[k]))


@dataclass
class LruState:
    h_re: np.ndarray
    h_im: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LruState":
        return cls(np.zeros(n), np.zeros(n))

    def copy(self) -> "LruState":
        return LruState(self.h_re.copy(), self.h_im.copy())


def init_lru_params(rng: np.random.Generator, n: int, d: int, m: int, *,
                    r_min: float = 0.0, r_max: float = 1.0,
                    max_phase: float = 2.0 * np.pi) -> LruParams:
    u = rng.uniform(r_min ** 2, r_max ** 2, size=n)
    r = np.clip(np.sqrt(u), 1e-6, 1.0 - 1e-9)
    theta = np.clip(rng.uniform(0.0, max_phase, size=n), 1e-6, None)
    b_in = 1.0 / np.sqrt(d)
    b_out = 1.0 / np.sqrt(n)
    return LruParams(
        nu_log=np.log(-np.log(r)),
        theta_log=np.log(theta),
        w_in_re=rng.uniform(-b_in, b_in, size=(n, d)),
        w_in_im=rng.uniform(-b_in, b_in, size=(n, d)),
        w_out_re=rng.uniform(-b_out, b_out, size=(m, n)),
        w_out_im=rng.uniform(-b_out, b_out, size=(m, n)),
    )


def lru_coefficients(params: LruParams, eps_gamma: float = 1e-12):
    """Same derived quantities as the trace-unit layer: here g and phi are
    the real and imaginary parts of the diagonal entries."""
    for name in ("nu_log", "theta_log", "w_in_re", "w_in_im", "w_out_re", "w_out_im"):
        if not np.all(np.isfinite(getattr(params, name))):
            raise InvalidParameterError(f"non-finite entries in {name}")
    r = np.exp(-np.exp(params.nu_log))
    theta = np.exp(params.theta_log)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    g = r * cos_t
    phi = r * sin_t
    gamma = np.sqrt(np.maximum(1.0 - r * r, eps_gamma))
    dr = -r * np.exp(params.nu_log)
    return {
        "r": r, "theta": theta, "g": g, "phi": phi, "gamma": gamma,
        "dg_nu": cos_t * dr, "dphi_nu": sin_t * dr,
        "dg_th": -phi * theta, "dphi_th": g * theta,
        "dgamma_nu": -(r / gamma) * dr,
    }


def lru_step_and_trace(state: LruState, traces: TraceStore, params: LruParams,
                       x: np.ndarray, coeffs=None) -> tuple[LruState, TraceStore, np.ndarray]:
    """Advance the complex-diagonal recurrence and its traces, returning the
    new state, new traces, and the real-projected output Re(W_out @ h).

    Trace layout reuses TraceStore with (c1, c2) = (re, im); the output
    matrices need no traces because they sit outside the recurrence.
    """
    if coeffs is None:
        coeffs = lru_coefficients(params)
    x = _as_f64(x)
    if x.shape != (params.d,):
        raise ShapeError(f"input has shape {x.shape}, expected ({params.d},)")
    new_state = state.copy()
    new_traces = traces.copy()
    pre_re = np.empty_like(state.h_re)
    pre_im = np.empty_like(state.h_im)
    kernels.rtu_fused_step(False, 0,
                           coeffs["g"], coeffs["phi"], coeffs["gamma"],
                           coeffs["dg_nu"], coeffs["dphi_nu"], coeffs["dg_th"],
                           coeffs["dphi_th"], coeffs["dgamma_nu"],
                           params.w_in_re, params.w_in_im, x,
                           new_state.h_re, new_state.h_im, pre_re, pre_im,
                           new_traces.e_nu_c1, new_traces.e_nu_c2,
                           new_traces.e_th_c1, new_traces.e_th_c2,
                           new_traces.ew11, new_traces.ew12,
                           new_traces.ew21, new_traces.ew22,
                           True)
    new_traces.check_finite()
    y = params.w_out_re @ new_state.h_re - params.w_out_im @ new_state.h_im
    return new_state, new_traces, y


def lru_output_backward(params: LruParams, state: LruState,
                        d_y: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Reverse the real projection y = Re(W_out @ h): output-matrix gradients
    plus the credit (d_re, d_im) entering the recurrent traces."""
    d_y = _as_f64(d_y)
    grads = {
        "w_out_re": np.outer(d_y, state.h_re),
        "w_out_im": -np.outer(d_y, state.h_im),
    }
    d_re = params.w_out_re.T @ d_y
    d_im = -params.w_out_im.T @ d_y
    return grads, d_re, d_im


def lru_assemble_grads(d_re: np.ndarray, d_im: np.ndarray,
                       traces: TraceStore) -> dict[str, np.ndarray]:
    return {
        "nu_log": d_re * traces.e_nu_c1 + d_im * traces.e_nu_c2,
        "theta_log": d_re * traces.e_th_c1 + d_im * traces.e_th_c2,
        "w_in_re": d_re[:, None] * traces.ew11 + d_im[:, None] * traces.ew21,
        "w_in_im": d_re[:, None] * traces.ew12 + d_im[:, None] * traces.ew22,
    }


class LruCell:
    """Stateful fast path for the online LRU: advances state and traces in
    place and exposes gradient assembly for both the recurrent parameters and
    the output projection."""

    def __init__(self, params: LruParams):
        self.params = params
        self.coeffs = lru_coefficients(params)
        self.state = LruState.zeros(params.n)
        self.traces = TraceStore.zeros(params.n, params.d)
        self._pre_re = np.empty(params.n)
        self._pre_im = np.empty(params.n)

    @property
    def out_dim(self) -> int:
        return self.params.m

    def refresh_coefficients(self):
        self.coeffs = lru_coefficients(self.params)

    def reset(self):
        self.state = LruState.zeros(self.params.n)
        self.traces = TraceStore.zeros(self.params.n, self.params.d)

    def step(self, x: np.ndarray) -> np.ndarray:
        c, s, t = self.coeffs, self.state, self.traces
        kernels.rtu_fused_step(False, 0,
                               c["g"], c["phi"], c["gamma"],
                               c["dg_nu"], c["dphi_nu"], c["dg_th"],
                               c["dphi_th"], c["dgamma_nu"],
                               self.params.w_in_re, self.params.w_in_im, x,
                               s.h_re, s.h_im, self._pre_re, self._pre_im,
                               t.e_nu_c1, t.e_nu_c2, t.e_th_c1, t.e_th_c2,
                               t.ew11, t.ew12, t.ew21, t.ew22,
                               True)
        return self.params.w_out_re @ s.h_re - self.params.w_out_im @ s.h_im

    def grads(self, d_y: np.ndarray) -> dict[str, np.ndarray]:
        return self.grads_at(self.snapshot(), d_y)

    def snapshot(self):
        return self.state.copy(), self.traces.copy()

    def load(self, snapshot):
        state, traces = snapshot
        self.state = state.copy()
        self.traces = traces.copy()

    def grads_at(self, snapshot, d_y: np.ndarray) -> dict[str, np.ndarray]:
        state, traces = snapshot
        out_grads, d_re, d_im = lru_output_backward(self.params, state, d_y)
        out_grads.update(lru_assemble_grads(d_re, d_im, traces))
        return out_grads


# ---------------------------------------------------------------------------
# Block-diagonal RNN
# ---------------------------------------------------------------------------

@dataclass
class BlockDiagParams:
    """Free 2x2 blocks: four unconstrained scalars per block instead of a
    scaled rotation. ``input_scale`` is a fixed (not learned) per-unit input
    multiplier so the rotation-constrained layer embeds exactly."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d_diag: np.ndarray
    w_c1: np.ndarray
    w_c2: np.ndarray
    input_scale: np.ndarray | None = None
    activation: str = "identity"

    def __post_init__(self):
        for name in ("a", "b", "c", "d_diag", "w_c1", "w_c2"):
            setattr(self, name, _as_f64(getattr(self, name)))
        n = self.a.shape[0]
        for name in ("b", "c", "d_diag"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have length {n}")
        if self.w_c1.shape != self.w_c2.shape or self.w_c1.shape[0] != n:
            raise ShapeError("input matrices must both be (n, d)")
        if self.input_scale is None:
            self.input_scale = np.ones(n)
        else:
            self.input_scale = _as_f64(self.input_scale)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def dim_in(self) -> int:
        return self.w_c1.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b, "c": self.c, "d_diag": self.d_diag,
                "w_c1": self.w_c1, "w_c2": self.w_c2}

    def load_dict(self, values):
        for k in self.as_dict():
            setattr(self, k, _as_f64(values[k]))


@dataclass
class BlockDiagTraces:
    """Eight per-unit vectors (two state components x four block scalars)
    plus the four input-weight matrices."""

    e_a_c1: np.ndarray
    e_a_c2: np.ndarray
    e_b_c1: np.ndarray
    e_b_c2: np.ndarray
    e_c_c1: np.ndarray
    e_c_c2: np.ndarray
    e_d_c1: np.ndarray
    e_d_c2: np.ndarray
    ew11: np.ndarray
    ew12: np.ndarray
    ew21: np.ndarray
    ew22: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "BlockDiagTraces":
        return cls(*[np.zeros(n) for _ in range(8)],
                   *[np.zeros((n, d)) for _ in range(4)])

    def _arrays(self):
        return (self.e_a_c1, self.e_a_c2, self.e_b_c1, self.e_b_c2,
                self.e_c_c1, self.e_c_c2, self.e_d_c1, self.e_d_c2,
                self.ew11, self.ew12, self.ew21, self.ew22)

    def copy(self) -> "BlockDiagTraces":
        return BlockDiagTraces(*(a.copy() for a in self._arrays()))

    def check_finite(self, step: int | None = None):
        for a in self._arrays():
            if not np.all(np.isfinite(a)):
                where = f" at step {step}" if step is not None else ""
                raise NumericsError(f"non-finite block-diagonal trace{where}")


def init_blockdiag_params(rng: np.random.Generator, n: int, d: int, *,
                          spectral_bound: float = 0.9,
                          activation: str = "identity") -> BlockDiagParams:
    """Blocks start as random rotations scaled inside the stability disk, so
    early dynamics match the constrained layer's regime."""
    r = rng.uniform(0.1, spectral_bound, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    bound = 1.0 / np.sqrt(d)
    return BlockDiagParams(
        a=r * np.cos(theta), b=-r * np.sin(theta),
        c=r * np.sin(theta), d_diag=r * np.cos(theta),
        w_c1=rng.uniform(-bound, bound, size=(n, d)),
        w_c2=rng.uniform(-bound, bound, size=(n, d)),
        activation=activation,
    )


def blockdiag_step_and_trace(state, traces: BlockDiagTraces, params: BlockDiagParams,
                             x: np.ndarray):
    """Advance the free-block recurrence and its traces.

    ``state`` is an (h_c1, h_c2) pair of arrays; returns the new pair and the
    new traces.
    """
    h_c1, h_c2 = state
    x = _as_f64(x)
    if x.shape != (params.dim_in,):
        raise ShapeError(f"input has shape {x.shape}, expected ({params.dim_in},)")
    new_h1, new_h2 = h_c1.copy(), h_c2.copy()
    new = traces.copy()
    kernels.blockdiag_fused_step(params.a, params.b, params.c, params.d_diag,
                                 params.input_scale, params.w_c1, params.w_c2, x,
                                 new_h1, new_h2,
                                 new.e_a_c1, new.e_a_c2, new.e_b_c1, new.e_b_c2,
                                 new.e_c_c1, new.e_c_c2, new.e_d_c1, new.e_d_c2,
                                 new.ew11, new.ew12, new.ew21, new.ew22,
                                 True)
    new.check_finite()
    return (new_h1, new_h2), new


def blockdiag_assemble_grads(d_c1: np.ndarray, d_c2: np.ndarray,
                             traces: BlockDiagTraces) -> dict[str, np.ndarray]:
    return {
        "a": d_c1 * traces.e_a_c1 + d_c2 * traces.e_a_c2,
        "b": d_c1 * traces.e_b_c1 + d_c2 * traces.e_b_c2,
        "c": d_c1 * traces.e_c_c1 + d_c2 * traces.e_c_c2,
        "d_diag": d_c1 * traces.e_d_c1 + d_c2 * traces.e_d_c2,
        "w_c1": d_c1[:, None] * traces.ew11 + d_c2[:, None] * traces.ew21,
        "w_c2": d_c1[:, None] * traces.ew12 + d_c2[:, None] * traces.ew22,
    }


class BlockDiagCell:
    """Stateful fast path for the free-block recurrence. Output stacks the
    optionally activated components, mirroring the linear trace-unit layout."""

    def __init__(self, params: BlockDiagParams):
        self.params = params
        self.h_c1 = np.zeros(params.n)
        self.h_c2 = np.zeros(params.n)
        self.traces = BlockDiagTraces.zeros(params.n, params.dim_in)

    @property
    def out_dim(self) -> int:
        return 2 * self.params.n

    def refresh_coefficients(self):
        pass  # parameters enter the kernel directly

    def reset(self):
        self.h_c1 = np.zeros(self.params.n)
        self.h_c2 = np.zeros(self.params.n)
        self.traces = BlockDiagTraces.zeros(self.params.n, self.params.dim_in)

    def step(self, x: np.ndarray) -> np.ndarray:
        p, t = self.params, self.traces
        kernels.blockdiag_fused_step(p.a, p.b, p.c, p.d_diag, p.input_scale,
                                     p.w_c1, p.w_c2, x,
                                     self.h_c1, self.h_c2,
                                     t.e_a_c1, t.e_a_c2, t.e_b_c1, t.e_b_c2,
                                     t.e_c_c1, t.e_c_c2, t.e_d_c1, t.e_d_c2,
                                     t.ew11, t.ew12, t.ew21, t.ew22,
                                     True)
        return self.output()

    def output(self) -> np.ndarray:
        from .core import activation_apply
        act = self.params.activation
        return np.concatenate([activation_apply(act, self.h_c1),
                               activation_apply(act, self.h_c2)])

    def grads(self, d_out: np.ndarray) -> dict[str, np.ndarray]:
        return self.grads_at(self.snapshot(), d_out)

    def snapshot(self):
        return self.h_c1.copy(), self.h_c2.copy(), self.traces.copy()

    def load(self, snapshot):
        h_c1, h_c2, traces = snapshot
        self.h_c1 = h_c1.copy()
        self.h_c2 = h_c2.copy()
        self.traces = traces.copy()

    def grads_at(self, snapshot, d_out: np.ndarray) -> dict[str, np.ndarray]:
        from .core import activation_deriv
        h_c1, h_c2, traces = snapshot
        n = self.params.n
        act = self.params.activation
        d1 = activation_deriv(act, h_c1) * d_out[:n]
        d2 = activation_deriv(act, h_c2) * d_out[n:]
        return blockdiag_assemble_grads(d1, d2, traces)


# ---------------------------------------------------------------------------
# Dense linear RNN
# ---------------------------------------------------------------------------

@dataclass
class DenseLinearRnnParams:
    w_h: np.ndarray
    w_x: np.ndarray

    def __post_init__(self):
        self.w_h = _as_f64(self.w_h)
        self.w_x = _as_f64(self.w_x)
        n = self.w_h.shape[0]
        if self.w_h.shape != (n, n):
            raise ShapeError("recurrent matrix must be square")
        if self.w_x.shape[0] != n:
            raise ShapeError("input matrix rows must match hidden size")

    @property
    def n(self) -> int:
        return self.w_h.shape[0]


def dense_linear_rnn_step(state: np.ndarray, params: DenseLinearRnnParams,
                          x: np.ndarray) -> np.ndarray:
    x = _as_f64(x)
    if state.shape != (params.n,) or x.shape != (params.w_x.shape[1],):
        raise ShapeError("state or input shape mismatch")
    return params.w_h @ state + params.w_x @ x


# ---------------------------------------------------------------------------
# Complex-eigenvalue counter for 3x3 matrices
# ---------------------------------------------------------------------------

def count_complex_eigenvalues_3x3(w: np.ndarray, tie_tol: float = 1e-12) -> int:
    """Count complex eigenvalues of a real 3x3 matrix via the discriminant of
    its characteristic cubic: negative discriminant means one real root and a
    conjugate pair. Discriminants within ``tie_tol`` of zero count as real.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3, 3):
        raise ShapeError("only 3x3 matrices are supported")
    # char poly: lambda^3 + p2 lambda^2 + p1 lambda + p0
    tr = w[0, 0] + w[1, 1] + w[2, 2]
    m2 = ((w[1, 1] * w[2, 2] - w[1, 2] * w[2, 1])
          + (w[0, 0] * w[2, 2] - w[0, 2] * w[2, 0])
          + (w[0, 0] * w[1, 1] - w[0, 1] * w[1, 0]))
    det = float(np.linalg.det(w))
    a, b, c, d = 1.0, -tr, m2, -det
    disc = (18.0 * a * b * c * d - 4.0 * b ** 3 * d + b ** 2 * c ** 2
            - 4.0 * a * c ** 3 - 27.0 * a ** 2 * d ** 2)
    if disc < -tie_tol:
        return 2
    return 0
