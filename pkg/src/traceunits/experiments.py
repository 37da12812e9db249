"""Self-contained experiment drivers behind the CLI: the gradient-oracle
triangle check and the complex-eigenvalue emergence run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import (count_complex_eigenvalues_3x3, init_blockdiag_params,
                        init_lru_params)
from .build import STREAM_ENV, STREAM_INIT, stream_rng
from .core import init_rtu_params
from .envs import ThreeStateMdp
from .optim import AdamState, adam_step
from .oracles import (QuadraticSequenceLoss, blockdiag_bptt_gradient,
                      blockdiag_sequence_loss, bptt_gradient,
                      dense_rnn_window_grad, finite_difference_gradient,
                      lru_bptt_gradient, lru_sequence_loss, rtrl_gradient,
                      rtu_sequence_loss)

# ---------------------------------------------------------------------------
# Gradient-oracle triangle
# ---------------------------------------------------------------------------

DEFAULT_GRID = tuple((n, d, T) for n in (1, 4, 8) for d in (1, 3) for T in (5, 50, 200))


def relative_error(a, b) -> float:
    """Norm-based relative disagreement over concatenated gradients."""
    va = np.concatenate([np.ravel(x) for x in a])
    vb = np.concatenate([np.ravel(x) for x in b])
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), 1e-300)
    return float(np.linalg.norm(va - vb) / denom)


def _rtu_triangle(rng, n, d, T, variant, fd_step, with_fd):
    params = init_rtu_params(rng, n, d, variant=variant, activation="tanh",
                             r_max=0.98)
    xs = rng.normal(size=(T, d))
    loss = QuadraticSequenceLoss.random(rng, 2 * n, T)
    _, g_bptt = bptt_gradient(params, xs, loss)
    _, g_rtrl = rtrl_gradient(params, xs, loss)
    keys = ("nu_log", "theta_log", "w_c1", "w_c2")
    a = [getattr(g_bptt, k) for k in keys]
    b = [getattr(g_rtrl, k) for k in keys]
    err_rb = relative_error(a, b)
    err_bf = None
    if with_fd:
        g_fd = finite_difference_gradient(lambda: rtu_sequence_loss(params, xs, loss),
                                          params.as_dict(), fd_step)
        err_bf = relative_error(a, [g_fd[k] for k in keys])
    return err_rb, err_bf


def _lru_triangle(rng, n, d, T, fd_step, with_fd):
    from .baselines import LruState, lru_step_and_trace, lru_output_backward, lru_assemble_grads
    from .core import TraceStore

    params = init_lru_params(rng, n, d, m=2, r_max=0.98)
    xs = rng.normal(size=(T, d))
    loss = QuadraticSequenceLoss.random(rng, 2, T)
    _, g_bptt = lru_bptt_gradient(params, xs, loss)
    state = LruState.zeros(n)
    traces = TraceStore.zeros(n, d)
    acc = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    for t in range(T):
        state, traces, y = lru_step_and_trace(state, traces, params, xs[t])
        _, dy = loss.step_grad(t, y)
        out_grads, dre, dim = lru_output_backward(params, state, dy)
        for k, v in out_grads.items():
            acc[k] += v
        for k, v in lru_assemble_grads(dre, dim, traces).items():
            acc[k] += v
    keys = sorted(acc)
    err_rb = relative_error([g_bptt[k] for k in keys], [acc[k] for k in keys])
    err_bf = None
    if with_fd:
        g_fd = finite_difference_gradient(lambda: lru_sequence_loss(params, xs, loss),
                                          params.as_dict(), fd_step)
        err_bf = relative_error([g_bptt[k] for k in keys], [g_fd[k] for k in keys])
    return err_rb, err_bf


def _blockdiag_triangle(rng, n, d, T, fd_step, with_fd):
    from .baselines import BlockDiagCell

    params = init_blockdiag_params(rng, n, d, activation="tanh")
    xs = rng.normal(size=(T, d))
    loss = QuadraticSequenceLoss.random(rng, 2 * n, T)
    _, g_bptt = blockdiag_bptt_gradient(params, xs, loss)
    cell = BlockDiagCell(params)
    acc = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    for t in range(T):
        out = cell.step(xs[t])
        _, d_out = loss.step_grad(t, out)
        for k, v in cell.grads(d_out).items():
            acc[k] += v
    keys = sorted(acc)
    err_rb = relative_error([g_bptt[k] for k in keys], [acc[k] for k in keys])
    err_bf = None
    if with_fd:
        g_fd = finite_difference_gradient(lambda: blockdiag_sequence_loss(params, xs, loss),
                                          params.as_dict(), fd_step)
        err_bf = relative_error([g_bptt[k] for k in keys], [g_fd[k] for k in keys])
    return err_rb, err_bf


_TRIANGLES = {
    "rtu_linear": lambda rng, n, d, T, s, f: _rtu_triangle(rng, n, d, T, "linear", s, f),
    "rtu_nonlinear": lambda rng, n, d, T, s, f: _rtu_triangle(rng, n, d, T, "nonlinear", s, f),
    "lru": _lru_triangle,
    "blockdiag": _blockdiag_triangle,
}


def run_gradcheck(grid=DEFAULT_GRID, seed: int = 0, fd_step: float = 1e-6,
                  exact_tol: float = 1e-10, fd_tol: float = 1e-5,
                  fd_max_t: int = 50):
    """Check forward-mode == reverse-mode == finite differences across the
    architecture grid. The exact pair runs at the full window; finite
    differences run on windows capped at ``fd_max_t`` (their cost grows with
    T * parameter count). Returns (ok, rows)."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    rows = []
    ok = True
    for arch, triangle in _TRIANGLES.items():
        for n, d, T in grid:
            err_rb, _ = triangle(rng, n, d, T, fd_step, False)
            _, err_bf = triangle(rng, n, d, min(T, fd_max_t), fd_step, True)
            exact_ok = err_rb <= exact_tol
            fd_ok = err_bf <= fd_tol
            ok = ok and exact_ok and fd_ok
            rows.append({"architecture": arch, "n": n, "d": d, "T": T,
                         "rtrl_vs_bptt": err_rb, "bptt_vs_fd": err_bf,
                         "ok": exact_ok and fd_ok})
    return ok, rows


# ---------------------------------------------------------------------------
# Complex-eigenvalue emergence on the three-state MDP
# ---------------------------------------------------------------------------

@dataclass
class EigenRunResult:
    seed: int
    steps: int
    log_steps: np.ndarray
    accuracy: np.ndarray          # windowed accuracy on transitions out of s3
    n_complex: np.ndarray         # eigenvalue count at each logged update
    reached_perfect_at: int       # first step with windowed accuracy == 1 (-1 if never)
    mean_complex_final: float     # mean count over the final tenth of updates


def run_eigen_seed(seed: int, steps: int = 50_000, lr: float = 3e-3,
                   truncation: int = 2, acc_window: int = 200,
                   log_every: int = 100) -> EigenRunResult:
    """Train a dense linear RNN (3 hidden units) with truncated-window
    gradients to predict the next observation of the three-state MDP, logging
    the complex-eigenvalue count of the recurrent matrix after every update.
    """
    init_rng = stream_rng(seed, STREAM_INIT)
    env = ThreeStateMdp(seed=(seed << 8) | STREAM_ENV)
    n = 3
    bound = 1.0 / np.sqrt(n)
    params = {
        "w_h": init_rng.uniform(-bound, bound, size=(n, n)),
        "w_x": init_rng.uniform(-bound, bound, size=(n, n)),
        "w_out": init_rng.uniform(-bound, bound, size=(n, n)),
        "b_out": np.zeros(n),
    }
    opt = AdamState(lr=lr)

    xs_window: list[np.ndarray] = []
    anchor = np.zeros(n)
    obs = env.observe()
    s3_hits: list[int] = []
    log_steps, accs, counts = [], [], []
    reached = -1
    all_counts = np.zeros(steps)
    for t in range(steps):
        prev_state = env.current
        if len(xs_window) == truncation:
            oldest = xs_window.pop(0)
            anchor = params["w_h"] @ anchor + params["w_x"] @ oldest
        xs_window.append(obs.copy())
        # prediction through the replayed window, then the true next state
        nxt, obs_next = env.next()
        _, grads, h_last = dense_rnn_window_grad(
            params["w_h"], params["w_x"], params["w_out"], params["b_out"],
            np.asarray(xs_window), anchor, nxt)
        logits = params["w_out"] @ h_last + params["b_out"]
        if prev_state == 2:
            s3_hits.append(1 if int(np.argmax(logits)) == nxt else 0)
        _, opt = adam_step(opt, params, grads, inplace=True)
        all_counts[t] = count_complex_eigenvalues_3x3(params["w_h"])
        obs = obs_next
        if (t + 1) % log_every == 0:
            window_hits = s3_hits[-acc_window:]
            acc = float(np.mean(window_hits)) if window_hits else 0.0
            log_steps.append(t + 1)
            accs.append(acc)
            counts.append(all_counts[t])
            if reached < 0 and len(window_hits) >= acc_window and acc == 1.0:
                reached = t + 1
    tail = all_counts[int(0.9 * steps):]
    return EigenRunResult(
        seed=seed, steps=steps,
        log_steps=np.asarray(log_steps, dtype=np.int64),
        accuracy=np.asarray(accs),
        n_complex=np.asarray(counts),
        reached_perfect_at=reached,
        mean_complex_final=float(np.mean(tail)) if tail.size else 0.0,
    )
