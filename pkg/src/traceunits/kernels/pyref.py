"""Pure-numpy kernels for the per-step recurrence and trace updates.

This module is the reference backend. The compiled backend in
``_speedups.pyx`` exports the same functions with the same in-place calling
convention; :mod:`traceunits.kernels` picks one at import time. Every array
argument is a C-contiguous float64 array that the kernel mutates in place.

Activation codes: 0 = identity, 1 = relu, 2 = tanh.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _act(code, z):
    if code == 0:
        return z
    if code == 1:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(code, z):
    if code == 0:
        return np.ones_like(z)
    if code == 1:
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def rtu_plain_step(nonlinear, act, g, phi, gamma, w_c1, w_c2, x,
                   h_c1, h_c2, pre_c1, pre_c2):
    """Advance the paired rotation state one step without touching traces."""
    z1 = g * h_c1 - phi * h_c2 + gamma * (w_c1 @ x)
    z2 = g * h_c2 + phi * h_c1 + gamma * (w_c2 @ x)
    pre_c1[:] = z1
    pre_c2[:] = z2
    if nonlinear:
        h_c1[:] = _act(act, z1)
        h_c2[:] = _act(act, z2)
    else:
        h_c1[:] = z1
        h_c2[:] = z2


def rtu_fused_step(nonlinear, act,
                   g, phi, gamma, dg_nu, dphi_nu, dg_th, dphi_th, dgamma_nu,
                   w_c1, w_c2, x,
                   h_c1, h_c2, pre_c1, pre_c2,
                   e_nu_c1, e_nu_c2, e_th_c1, e_th_c2,
                   ew11, ew12, ew21, ew22,
                   update_traces):
    """One fused forward + sensitivity-trace update, in place.

    The trace recursions read the previous state and previous traces, so they
    are evaluated before the state arrays are overwritten. For the nonlinear
    recurrence every right-hand side (including the input-normalizer term) is
    scaled elementwise by f'(new pre-activation) of its component.
    """
    u1 = w_c1 @ x
    u2 = w_c2 @ x
    z1 = g * h_c1 - phi * h_c2 + gamma * u1
    z2 = g * h_c2 + phi * h_c1 + gamma * u2

    if update_traces:
        t_nu1 = dg_nu * h_c1 + g * e_nu_c1 - dphi_nu * h_c2 - phi * e_nu_c2 + dgamma_nu * u1
        t_nu2 = dg_nu * h_c2 + g * e_nu_c2 + dphi_nu * h_c1 + phi * e_nu_c1 + dgamma_nu * u2
        t_th1 = dg_th * h_c1 + g * e_th_c1 - dphi_th * h_c2 - phi * e_th_c2
        t_th2 = dg_th * h_c2 + g * e_th_c2 + dphi_th * h_c1 + phi * e_th_c1
        t11 = g[:, None] * ew11 - phi[:, None] * ew21 + gamma[:, None] * x[None, :]
        t21 = g[:, None] * ew21 + phi[:, None] * ew11
        t12 = g[:, None] * ew12 - phi[:, None] * ew22
        t22 = g[:, None] * ew22 + phi[:, None] * ew12 + gamma[:, None] * x[None, :]
        if nonlinear:
            fp1 = _act_deriv(act, z1)
            fp2 = _act_deriv(act, z2)
            t_nu1 *= fp1
            t_nu2 *= fp2
            t_th1 *= fp1
            t_th2 *= fp2
            t11 *= fp1[:, None]
            t12 *= fp1[:, None]
            t21 *= fp2[:, None]
            t22 *= fp2[:, None]
        e_nu_c1[:] = t_nu1
        e_nu_c2[:] = t_nu2
        e_th_c1[:] = t_th1
        e_th_c2[:] = t_th2
        ew11[:] = t11
        ew12[:] = t12
        ew21[:] = t21
        ew22[:] = t22

    pre_c1[:] = z1
    pre_c2[:] = z2
    if nonlinear:
        h_c1[:] = _act(act, z1)
        h_c2[:] = _act(act, z2)
    else:
        h_c1[:] = z1
        h_c2[:] = z2


def blockdiag_fused_step(a, b, c, d, scale, w_c1, w_c2, x,
                         h_c1, h_c2,
                         e_a_c1, e_a_c2, e_b_c1, e_b_c2,
                         e_c_c1, e_c_c2, e_d_c1, e_d_c2,
                         ew11, ew12, ew21, ew22,
                         update_traces):
    """Fused step for the free 2x2-block recurrence (no rotation constraint)."""
    u1 = scale * (w_c1 @ x)
    u2 = scale * (w_c2 @ x)
    z1 = a * h_c1 + b * h_c2 + u1
    z2 = c * h_c1 + d * h_c2 + u2

    if update_traces:
        t_a1 = h_c1 + a * e_a_c1 + b * e_a_c2
        t_a2 = c * e_a_c1 + d * e_a_c2
        t_b1 = h_c2 + a * e_b_c1 + b * e_b_c2
        t_b2 = c * e_b_c1 + d * e_b_c2
        t_c1 = a * e_c_c1 + b * e_c_c2
        t_c2 = h_c1 + c * e_c_c1 + d * e_c_c2
        t_d1 = a * e_d_c1 + b * e_d_c2
        t_d2 = h_c2 + c * e_d_c1 + d * e_d_c2
        t11 = a[:, None] * ew11 + b[:, None] * ew21 + scale[:, None] * x[None, :]
        t21 = c[:, None] * ew11 + d[:, None] * ew21
        t12 = a[:, None] * ew12 + b[:, None] * ew22
        t22 = c[:, None] * ew12 + d[:, None] * ew22 + scale[:, None] * x[None, :]
        e_a_c1[:] = t_a1
        e_a_c2[:] = t_a2
        e_b_c1[:] = t_b1
        e_b_c2[:] = t_b2
        e_c_c1[:] = t_c1
        e_c_c2[:] = t_c2
        e_d_c1[:] = t_d1
        e_d_c2[:] = t_d2
        ew11[:] = t11
        ew12[:] = t12
        ew21[:] = t21
        ew22[:] = t22

    h_c1[:] = z1
    h_c2[:] = z2


def rtu_window_forward(nonlinear, act, g, phi, gamma, w_c1, w_c2, xs,
                       h0_c1, h0_c2,
                       hs_c1, hs_c2, pres_c1, pres_c2, us_c1, us_c2):
    """Replay the recurrence over a window of inputs, recording the trajectory.

    ``xs`` has shape (T, d); ``hs_*`` have shape (T+1, n) and row 0 receives
    the window-start state; ``pres_*`` and ``us_*`` have shape (T, n).
    """
    T = xs.shape[0]
    hs_c1[0] = h0_c1
    hs_c2[0] = h0_c2
    for t in range(T):
        u1 = w_c1 @ xs[t]
        u2 = w_c2 @ xs[t]
        us_c1[t] = u1
        us_c2[t] = u2
        z1 = g * hs_c1[t] - phi * hs_c2[t] + gamma * u1
        z2 = g * hs_c2[t] + phi * hs_c1[t] + gamma * u2
        pres_c1[t] = z1
        pres_c2[t] = z2
        if nonlinear:
            hs_c1[t + 1] = _act(act, z1)
            hs_c2[t + 1] = _act(act, z2)
        else:
            hs_c1[t + 1] = z1
            hs_c2[t + 1] = z2


def array_probe_sum(g):
    """Sum of all entries; NaN/inf propagate, so a finite result certifies a
    finite array (used to gate updates cheaply)."""
    return float(g.sum())


def adam_array_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """Fused in-place Adam update for one parameter array."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def rtu_window_backward(nonlinear, act,
                        g, phi, gamma, dg_nu, dphi_nu, dg_th, dphi_th, dgamma_nu,
                        xs, hs_c1, hs_c2, pres_c1, pres_c2, us_c1, us_c2,
                        d_c1, d_c2,
                        out_nu, out_th, out_w1, out_w2):
    """Reverse sweep over a recorded window with credit at the final state.

    ``d_c1``/``d_c2`` are the loss gradients w.r.t. the final state vectors
    (for the linear recurrence the caller folds any post-activation first).
    Gradients are accumulated into the ``out_*`` arrays, which are zeroed
    here.
    """
    T = xs.shape[0]
    n = d_c1.shape[0]
    acc_g = np.zeros(n)
    acc_phi = np.zeros(n)
    acc_gamma = np.zeros(n)
    out_nu[:] = 0.0
    out_th[:] = 0.0
    out_w1[:] = 0.0
    out_w2[:] = 0.0
    dh1 = d_c1.copy()
    dh2 = d_c2.copy()
    for t in range(T - 1, -1, -1):
        if nonlinear:
            dz1 = _act_deriv(act, pres_c1[t]) * dh1
            dz2 = _act_deriv(act, pres_c2[t]) * dh2
        else:
            dz1 = dh1
            dz2 = dh2
        acc_g += dz1 * hs_c1[t] + dz2 * hs_c2[t]
        acc_phi += dz2 * hs_c1[t] - dz1 * hs_c2[t]
        acc_gamma += dz1 * us_c1[t] + dz2 * us_c2[t]
        out_w1 += np.outer(gamma * dz1, xs[t])
        out_w2 += np.outer(gamma * dz2, xs[t])
        dh1, dh2 = g * dz1 + phi * dz2, g * dz2 - phi * dz1
    out_nu[:] = acc_g * dg_nu + acc_phi * dphi_nu + acc_gamma * dgamma_nu
    out_th[:] = acc_g * dg_th + acc_phi * dphi_th
