"""Independent gradient references and the truncated-window training mode.

The reverse-accumulation unrolls here are hand-derived from the recurrence
equations and share no code with the forward-mode trace recursions, so the
two routes check each other; central finite differences close the triangle
from the loss side. Oracles run at desk scale only and are excluded from any
timing claim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .baselines import (BlockDiagParams, LruParams, LruState, lru_coefficients)
from .core import (ACTIVATION_CODES, Coefficients, ParamGrad, RtuParams, RtuState,
                   activation_apply, activation_deriv, derive_coefficients)
from .errors import ShapeError
from .optim import AdamState, adam_step


class QuadraticSequenceLoss:
    """loss_t = 0.5 * ||A out_t - y_t||^2 with a fixed readout A.

    Local in time, so the same object serves the online forward-mode route
    and the offline reverse-mode route.
    """

    def __init__(self, a: np.ndarray, targets: np.ndarray):
        self.a = np.asarray(a, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)

    @classmethod
    def random(cls, rng: np.random.Generator, out_dim: int, steps: int,
               loss_dim: int = 2) -> "QuadraticSequenceLoss":
        return cls(rng.normal(size=(loss_dim, out_dim)) / np.sqrt(out_dim),
                   rng.normal(size=(steps, loss_dim)))

    def step_grad(self, t: int, out: np.ndarray) -> tuple[float, np.ndarray]:
        resid = self.a @ out - self.targets[t]
        return 0.5 * float(resid @ resid), self.a.T @ resid


# ---------------------------------------------------------------------------
# Trace-unit layer: forward unroll, reverse gradient, forward-mode reference
# ---------------------------------------------------------------------------

def rtu_unroll(params: RtuParams, xs: np.ndarray, coeffs: Coefficients | None = None):
    """Run the recurrence from a zero state over xs of shape (T, d).

    Returns per-step arrays: states h (T+1, 2 components), pre-activations,
    input projections u = W x, and combined outputs.
    """
    if coeffs is None:
        coeffs = derive_coefficients(params)
    T = xs.shape[0]
    n = params.n
    nonlin = params.variant == "nonlinear"
    h1 = np.zeros((T + 1, n))
    h2 = np.zeros((T + 1, n))
    p1 = np.zeros((T, n))
    p2 = np.zeros((T, n))
    u1 = np.zeros((T, n))
    u2 = np.zeros((T, n))
    outs = np.zeros((T, 2 * n))
    for t in range(T):
        u1[t] = params.w_c1 @ xs[t]
        u2[t] = params.w_c2 @ xs[t]
        z1 = coeffs.g * h1[t] - coeffs.phi * h2[t] + coeffs.gamma * u1[t]
        z2 = coeffs.g * h2[t] + coeffs.phi * h1[t] + coeffs.gamma * u2[t]
        p1[t], p2[t] = z1, z2
        if nonlin:
            h1[t + 1] = activation_apply(params.activation, z1)
            h2[t + 1] = activation_apply(params.activation, z2)
            outs[t] = np.concatenate([h1[t + 1], h2[t + 1]])
        else:
            h1[t + 1], h2[t + 1] = z1, z2
            outs[t] = np.concatenate([activation_apply(params.activation, z1),
                                      activation_apply(params.activation, z2)])
    return h1, h2, p1, p2, u1, u2, outs


def rtu_sequence_loss(params: RtuParams, xs: np.ndarray, loss) -> float:
    _, _, _, _, _, _, outs = rtu_unroll(params, xs)
    return sum(loss.step_grad(t, outs[t])[0] for t in range(xs.shape[0]))


def bptt_gradient(params: RtuParams, xs: np.ndarray, loss,
                  max_steps: int = 100_000) -> tuple[float, ParamGrad]:
    """Exact full-unroll reverse-accumulation gradient for frozen parameters."""
    T = xs.shape[0]
    if T > max_steps:
        raise ShapeError(f"sequence length {T} exceeds the unroll cap {max_steps}")
    coeffs = derive_coefficients(params)
    h1, h2, p1, p2, u1, u2, outs = rtu_unroll(params, xs, coeffs)
    n = params.n
    nonlin = params.variant == "nonlinear"
    total = 0.0
    d_outs = np.zeros((T, 2 * n))
    for t in range(T):
        lt, d_outs[t] = loss.step_grad(t, outs[t])
        total += lt

    acc_g = np.zeros(n)
    acc_phi = np.zeros(n)
    acc_gamma = np.zeros(n)
    gw1 = np.zeros_like(params.w_c1)
    gw2 = np.zeros_like(params.w_c2)
    dh1 = np.zeros(n)
    dh2 = np.zeros(n)
    for t in range(T - 1, -1, -1):
        do1, do2 = d_outs[t, :n], d_outs[t, n:]
        if nonlin:
            dh1 = dh1 + do1
            dh2 = dh2 + do2
            dz1 = activation_deriv(params.activation, p1[t]) * dh1
            dz2 = activation_deriv(params.activation, p2[t]) * dh2
        else:
            dh1 = dh1 + activation_deriv(params.activation, h1[t + 1]) * do1
            dh2 = dh2 + activation_deriv(params.activation, h2[t + 1]) * do2
            dz1, dz2 = dh1, dh2
        acc_g += dz1 * h1[t] + dz2 * h2[t]
        acc_phi += dz2 * h1[t] - dz1 * h2[t]
        acc_gamma += dz1 * u1[t] + dz2 * u2[t]
        gw1 += np.outer(coeffs.gamma * dz1, xs[t])
        gw2 += np.outer(coeffs.gamma * dz2, xs[t])
        dh1, dh2 = coeffs.g * dz1 + coeffs.phi * dz2, coeffs.g * dz2 - coeffs.phi * dz1
    grad = ParamGrad(
        nu_log=acc_g * coeffs.dg_nu + acc_phi * coeffs.dphi_nu + acc_gamma * coeffs.dgamma_nu,
        theta_log=acc_g * coeffs.dg_th + acc_phi * coeffs.dphi_th,
        w_c1=gw1, w_c2=gw2,
    )
    return total, grad


def rtrl_gradient(params: RtuParams, xs: np.ndarray, loss) -> tuple[float, ParamGrad]:
    """Accumulated forward-mode gradient over the sequence, via the same cell
    the agents use. One side of the oracle triangle."""
    from .core import RtuCell  # local import to keep module load light

    cell = RtuCell(params.copy())
    total = 0.0
    grad = ParamGrad.zeros_like(params)
    for t in range(xs.shape[0]):
        out = cell.step(xs[t])
        lt, d_out = loss.step_grad(t, out)
        total += lt
        grad.add_(cell.param_grads(cell.credit(d_out)))
    return total, grad


# ---------------------------------------------------------------------------
# Online LRU: unroll and reverse gradient
# ---------------------------------------------------------------------------

def lru_unroll(params: LruParams, xs: np.ndarray):
    co = lru_coefficients(params)
    T = xs.shape[0]
    n = params.n
    hre = np.zeros((T + 1, n))
    him = np.zeros((T + 1, n))
    u_re = np.zeros((T, n))
    u_im = np.zeros((T, n))
    ys = np.zeros((T, params.m))
    for t in range(T):
        u_re[t] = params.w_in_re @ xs[t]
        u_im[t] = params.w_in_im @ xs[t]
        hre[t + 1] = co["g"] * hre[t] - co["phi"] * him[t] + co["gamma"] * u_re[t]
        him[t + 1] = co["g"] * him[t] + co["phi"] * hre[t] + co["gamma"] * u_im[t]
        ys[t] = params.w_out_re @ hre[t + 1] - params.w_out_im @ him[t + 1]
    return hre, him, u_re, u_im, ys, co


def lru_sequence_loss(params: LruParams, xs: np.ndarray, loss) -> float:
    _, _, _, _, ys, _ = lru_unroll(params, xs)
    return sum(loss.step_grad(t, ys[t])[0] for t in range(xs.shape[0]))


def lru_bptt_gradient(params: LruParams, xs: np.ndarray, loss):
    T = xs.shape[0]
    n = params.n
    hre, him, u_re, u_im, ys, co = lru_unroll(params, xs)
    total = 0.0
    d_ys = np.zeros((T, params.m))
    for t in range(T):
        lt, d_ys[t] = loss.step_grad(t, ys[t])
        total += lt
    acc_g = np.zeros(n)
    acc_phi = np.zeros(n)
    acc_gamma = np.zeros(n)
    g_in_re = np.zeros_like(params.w_in_re)
    g_in_im = np.zeros_like(params.w_in_im)
    g_out_re = np.zeros_like(params.w_out_re)
    g_out_im = np.zeros_like(params.w_out_im)
    dre = np.zeros(n)
    dim = np.zeros(n)
    for t in range(T - 1, -1, -1):
        dy = d_ys[t]
        g_out_re += np.outer(dy, hre[t + 1])
        g_out_im -= np.outer(dy, him[t + 1])
        dre = dre + params.w_out_re.T @ dy
        dim = dim - params.w_out_im.T @ dy
        acc_g += dre * hre[t] + dim * him[t]
        acc_phi += dim * hre[t] - dre * him[t]
        acc_gamma += dre * u_re[t] + dim * u_im[t]
        g_in_re += np.outer(co["gamma"] * dre, xs[t])
        g_in_im += np.outer(co["gamma"] * dim, xs[t])
        dre, dim = co["g"] * dre + co["phi"] * dim, co["g"] * dim - co["phi"] * dre
    grads = {
        "nu_log": acc_g * co["dg_nu"] + acc_phi * co["dphi_nu"] + acc_gamma * co["dgamma_nu"],
        "theta_log": acc_g * co["dg_th"] + acc_phi * co["dphi_th"],
        "w_in_re": g_in_re, "w_in_im": g_in_im,
        "w_out_re": g_out_re, "w_out_im": g_out_im,
    }
    return total, grads


# ---------------------------------------------------------------------------
# Block-diagonal RNN: unroll and reverse gradient
# ---------------------------------------------------------------------------

def blockdiag_unroll(params: BlockDiagParams, xs: np.ndarray):
    T = xs.shape[0]
    n = params.n
    h1 = np.zeros((T + 1, n))
    h2 = np.zeros((T + 1, n))
    u1 = np.zeros((T, n))
    u2 = np.zeros((T, n))
    outs = np.zeros((T, 2 * n))
    s = params.input_scale
    for t in range(T):
        u1[t] = s * (params.w_c1 @ xs[t])
        u2[t] = s * (params.w_c2 @ xs[t])
        h1[t + 1] = params.a * h1[t] + params.b * h2[t] + u1[t]
        h2[t + 1] = params.c * h1[t] + params.d_diag * h2[t] + u2[t]
        outs[t] = np.concatenate([activation_apply(params.activation, h1[t + 1]),
                                  activation_apply(params.activation, h2[t + 1])])
    return h1, h2, u1, u2, outs


def blockdiag_sequence_loss(params: BlockDiagParams, xs: np.ndarray, loss) -> float:
    _, _, _, _, outs = blockdiag_unroll(params, xs)
    return sum(loss.step_grad(t, outs[t])[0] for t in range(xs.shape[0]))


def blockdiag_bptt_gradient(params: BlockDiagParams, xs: np.ndarray, loss):
    T = xs.shape[0]
    n = params.n
    h1, h2, u1, u2, outs = blockdiag_unroll(params, xs)
    total = 0.0
    d_outs = np.zeros((T, 2 * n))
    for t in range(T):
        lt, d_outs[t] = loss.step_grad(t, outs[t])
        total += lt
    ga = np.zeros(n)
    gb = np.zeros(n)
    gc = np.zeros(n)
    gd = np.zeros(n)
    gw1 = np.zeros_like(params.w_c1)
    gw2 = np.zeros_like(params.w_c2)
    dh1 = np.zeros(n)
    dh2 = np.zeros(n)
    s = params.input_scale
    for t in range(T - 1, -1, -1):
        do1, do2 = d_outs[t, :n], d_outs[t, n:]
        dh1 = dh1 + activation_deriv(params.activation, h1[t + 1]) * do1
        dh2 = dh2 + activation_deriv(params.activation, h2[t + 1]) * do2
        ga += dh1 * h1[t]
        gb += dh1 * h2[t]
        gc += dh2 * h1[t]
        gd += dh2 * h2[t]
        gw1 += np.outer(s * dh1, xs[t])
        gw2 += np.outer(s * dh2, xs[t])
        dh1, dh2 = params.a * dh1 + params.c * dh2, params.b * dh1 + params.d_diag * dh2
    grads = {"a": ga, "b": gb, "c": gc, "d_diag": gd, "w_c1": gw1, "w_c2": gw2}
    return total, grads


# ---------------------------------------------------------------------------
# Central finite differences over flat parameter dicts
# ---------------------------------------------------------------------------

def finite_difference_gradient(loss_fn, params: dict[str, np.ndarray],
                               step: float = 1e-6) -> dict[str, np.ndarray]:
    """(L(p + step) - L(p - step)) / (2 step) per scalar parameter.

    ``loss_fn`` takes no arguments and must read the arrays in ``params``
    (they are perturbed in place and restored).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    grads = {}
    for key, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            lp = loss_fn()
            flat[i] = saved - step
            lm = loss_fn()
            flat[i] = saved
            gflat[i] = (lp - lm) / (2.0 * step)
        grads[key] = g
    return grads


# ---------------------------------------------------------------------------
# Truncated-window training
# ---------------------------------------------------------------------------

@dataclass
class UnrollRecord:
    """Ring of the last <= T inputs plus the state where the window starts.

    The anchor state is the live state from T steps ago; pushing into a full
    ring advances the anchor one step under the current parameters.
    """

    truncation: int
    n: int
    d: int
    xs: list = field(default_factory=list)
    anchor_c1: np.ndarray | None = None
    anchor_c2: np.ndarray | None = None
    loss_sum: float = 0.0

    def __post_init__(self):
        if self.anchor_c1 is None:
            self.anchor_c1 = np.zeros(self.n)
            self.anchor_c2 = np.zeros(self.n)

    def __len__(self) -> int:
        return len(self.xs)

    def reset(self):
        self.xs.clear()
        self.anchor_c1 = np.zeros(self.n)
        self.anchor_c2 = np.zeros(self.n)

    def push(self, x: np.ndarray, params: RtuParams, coeffs: Coefficients):
        """Append an input; once the ring is full the oldest input advances
        the anchor state so the window always spans the last T steps."""
        if len(self.xs) == self.truncation:
            oldest = self.xs.pop(0)
            pre1 = np.empty(self.n)
            pre2 = np.empty(self.n)
            kernels.rtu_plain_step(params.variant == "nonlinear",
                                   ACTIVATION_CODES[params.activation],
                                   coeffs.g, coeffs.phi, coeffs.gamma,
                                   params.w_c1, params.w_c2, oldest,
                                   self.anchor_c1, self.anchor_c2, pre1, pre2)
        self.xs.append(np.asarray(x, dtype=np.float64).copy())


class RtuWindowScratch:
    """Preallocated trajectory buffers for the window forward/backward."""

    def __init__(self, truncation: int, n: int):
        self.hs_c1 = np.zeros((truncation + 1, n))
        self.hs_c2 = np.zeros((truncation + 1, n))
        self.pres_c1 = np.zeros((truncation, n))
        self.pres_c2 = np.zeros((truncation, n))
        self.us_c1 = np.zeros((truncation, n))
        self.us_c2 = np.zeros((truncation, n))


def rtu_window_output(xs: np.ndarray, anchor_c1: np.ndarray, anchor_c2: np.ndarray,
                      params: RtuParams, coeffs: Coefficients,
                      scratch: RtuWindowScratch) -> np.ndarray:
    """Replay the window under the current parameters; return the combined
    output at the final state. The scratch keeps the trajectory for the
    matching backward call."""
    T = xs.shape[0]
    nonlin = params.variant == "nonlinear"
    kernels.rtu_window_forward(nonlin, ACTIVATION_CODES[params.activation],
                               coeffs.g, coeffs.phi, coeffs.gamma,
                               params.w_c1, params.w_c2, xs,
                               anchor_c1, anchor_c2,
                               scratch.hs_c1, scratch.hs_c2,
                               scratch.pres_c1, scratch.pres_c2,
                               scratch.us_c1, scratch.us_c2)
    h1 = scratch.hs_c1[T]
    h2 = scratch.hs_c2[T]
    if nonlin:
        return np.concatenate([h1, h2])
    return np.concatenate([activation_apply(params.activation, h1),
                           activation_apply(params.activation, h2)])


def rtu_window_gradient(xs: np.ndarray, params: RtuParams, coeffs: Coefficients,
                        scratch: RtuWindowScratch, d_out: np.ndarray) -> ParamGrad:
    """Gradient of a final-step loss w.r.t. the recurrent parameters through
    the replayed window (call right after rtu_window_output)."""
    T = xs.shape[0]
    n = params.n
    nonlin = params.variant == "nonlinear"
    d1, d2 = d_out[:n].copy(), d_out[n:].copy()
    if not nonlin:
        d1 *= activation_deriv(params.activation, scratch.hs_c1[T])
        d2 *= activation_deriv(params.activation, scratch.hs_c2[T])
    grad = ParamGrad.zeros_like(params)
    kernels.rtu_window_backward(nonlin, ACTIVATION_CODES[params.activation],
                                coeffs.g, coeffs.phi, coeffs.gamma,
                                coeffs.dg_nu, coeffs.dphi_nu, coeffs.dg_th,
                                coeffs.dphi_th, coeffs.dgamma_nu,
                                xs,
                                scratch.hs_c1[:T + 1], scratch.hs_c2[:T + 1],
                                scratch.pres_c1[:T], scratch.pres_c2[:T],
                                scratch.us_c1[:T], scratch.us_c2[:T],
                                d1, d2,
                                grad.nu_log, grad.theta_log, grad.w_c1, grad.w_c2)
    return grad


def tbptt_train_step(record: UnrollRecord, params: RtuParams, opt_state: AdamState,
                     loss_grad) -> tuple[RtuParams, AdamState, float]:
    """One truncated-window update: replay the window, evaluate the final-step
    loss via ``loss_grad(output) -> (loss, d_output)``, backpropagate through
    the window only, and apply Adam."""
    if len(record.xs) == 0:
        raise ValueError("empty unroll record")
    coeffs = derive_coefficients(params)
    xs = np.asarray(record.xs)
    scratch = RtuWindowScratch(xs.shape[0], params.n)
    out = rtu_window_output(xs, record.anchor_c1, record.anchor_c2, params, coeffs, scratch)
    loss, d_out = loss_grad(out)
    record.loss_sum += loss
    grad = rtu_window_gradient(xs, params, coeffs, scratch, np.asarray(d_out, dtype=np.float64))
    new_values, opt_state = adam_step(opt_state, params.as_dict(), grad.as_dict())
    new_params = params.copy()
    new_params.load_dict(new_values)
    return new_params, opt_state, loss


# ---------------------------------------------------------------------------
# Dense linear RNN: windowed gradient for next-observation prediction
# ---------------------------------------------------------------------------

def dense_rnn_window_grad(w_h: np.ndarray, w_x: np.ndarray,
                          w_out: np.ndarray, b_out: np.ndarray,
                          xs: np.ndarray, h0: np.ndarray,
                          target: int) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Cross-entropy window gradient for h' = W_h h + W_x x with a softmax
    readout at the final step. Returns (loss, grads, final_state)."""
    T = xs.shape[0]
    hs = [h0]
    for t in range(T):
        hs.append(w_h @ hs[-1] + w_x @ xs[t])
    logits = w_out @ hs[-1] + b_out
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    loss = -float(np.log(max(p[target], 1e-300)))
    d_logits = p.copy()
    d_logits[target] -= 1.0
    g_out = np.outer(d_logits, hs[-1])
    g_bout = d_logits.copy()
    dh = w_out.T @ d_logits
    g_wh = np.zeros_like(w_h)
    g_wx = np.zeros_like(w_x)
    for t in range(T - 1, -1, -1):
        g_wh += np.outer(dh, hs[t])
        g_wx += np.outer(dh, xs[t])
        dh = w_h.T @ dh
    grads = {"w_h": g_wh, "w_x": g_wx, "w_out": g_out, "b_out": g_bout}
    return loss, grads, hs[-1]
