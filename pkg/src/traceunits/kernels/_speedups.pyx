# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-step kernels; mirrors pyref.py function for function.

Arithmetic follows the same expression order as the reference backend so the
two agree to the last few ulps (matvec accumulation order is the only
difference). Activation codes: 0 = identity, 1 = relu, 2 = tanh.
"""

from libc.math cimport sqrt as csqrt
from libc.math cimport tanh as ctanh

import numpy as np

BACKEND_NAME = "compiled"


cdef inline double _act(int code, double z) noexcept nogil:
    if code == 0:
        return z
    if code == 1:
        return z if z > 0.0 else 0.0
    return ctanh(z)


cdef inline double _act_deriv(int code, double z) noexcept nogil:
    cdef double t
    if code == 0:
        return 1.0
    if code == 1:
        return 1.0 if z > 0.0 else 0.0
    t = ctanh(z)
    return 1.0 - t * t


def rtu_plain_step(bint nonlinear, int act,
                   double[::1] g, double[::1] phi, double[::1] gamma,
                   double[:, ::1] w_c1, double[:, ::1] w_c2, double[::1] x,
                   double[::1] h_c1, double[::1] h_c2,
                   double[::1] pre_c1, double[::1] pre_c2):
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i, j
    cdef double u1, u2, z1, z2
    with nogil:
        for i in range(n):
            u1 = 0.0
            u2 = 0.0
            for j in range(d):
                u1 += w_c1[i, j] * x[j]
                u2 += w_c2[i, j] * x[j]
            z1 = g[i] * h_c1[i] - phi[i] * h_c2[i] + gamma[i] * u1
            z2 = g[i] * h_c2[i] + phi[i] * h_c1[i] + gamma[i] * u2
            pre_c1[i] = z1
            pre_c2[i] = z2
            if nonlinear:
                h_c1[i] = _act(act, z1)
                h_c2[i] = _act(act, z2)
            else:
                h_c1[i] = z1
                h_c2[i] = z2


def rtu_fused_step(bint nonlinear, int act,
                   double[::1] g, double[::1] phi, double[::1] gamma,
                   double[::1] dg_nu, double[::1] dphi_nu,
                   double[::1] dg_th, double[::1] dphi_th, double[::1] dgamma_nu,
                   double[:, ::1] w_c1, double[:, ::1] w_c2, double[::1] x,
                   double[::1] h_c1, double[::1] h_c2,
                   double[::1] pre_c1, double[::1] pre_c2,
                   double[::1] e_nu_c1, double[::1] e_nu_c2,
                   double[::1] e_th_c1, double[::1] e_th_c2,
                   double[:, ::1] ew11, double[:, ::1] ew12,
                   double[:, ::1] ew21, double[:, ::1] ew22,
                   bint update_traces):
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i, j
    cdef double u1, u2, z1, z2, h1, h2
    cdef double gi, pi, fp1, fp2, xj
    cdef double t_nu1, t_nu2, t_th1, t_th2, e11, e12, e21, e22
    with nogil:
        for i in range(n):
            u1 = 0.0
            u2 = 0.0
            for j in range(d):
                u1 += w_c1[i, j] * x[j]
                u2 += w_c2[i, j] * x[j]
            h1 = h_c1[i]
            h2 = h_c2[i]
            gi = g[i]
            pi = phi[i]
            z1 = gi * h1 - pi * h2 + gamma[i] * u1
            z2 = gi * h2 + pi * h1 + gamma[i] * u2
            if update_traces:
                t_nu1 = dg_nu[i] * h1 + gi * e_nu_c1[i] - dphi_nu[i] * h2 - pi * e_nu_c2[i] + dgamma_nu[i] * u1
                t_nu2 = dg_nu[i] * h2 + gi * e_nu_c2[i] + dphi_nu[i] * h1 + pi * e_nu_c1[i] + dgamma_nu[i] * u2
                t_th1 = dg_th[i] * h1 + gi * e_th_c1[i] - dphi_th[i] * h2 - pi * e_th_c2[i]
                t_th2 = dg_th[i] * h2 + gi * e_th_c2[i] + dphi_th[i] * h1 + pi * e_th_c1[i]
                if nonlinear:
                    fp1 = _act_deriv(act, z1)
                    fp2 = _act_deriv(act, z2)
                    t_nu1 *= fp1
                    t_nu2 *= fp2
                    t_th1 *= fp1
                    t_th2 *= fp2
                else:
                    fp1 = 1.0
                    fp2 = 1.0
                e_nu_c1[i] = t_nu1
                e_nu_c2[i] = t_nu2
                e_th_c1[i] = t_th1
                e_th_c2[i] = t_th2
                for j in range(d):
                    xj = x[j]
                    e11 = gi * ew11[i, j] - pi * ew21[i, j] + gamma[i] * xj
                    e21 = gi * ew21[i, j] + pi * ew11[i, j]
                    e12 = gi * ew12[i, j] - pi * ew22[i, j]
                    e22 = gi * ew22[i, j] + pi * ew12[i, j] + gamma[i] * xj
                    if nonlinear:
                        e11 *= fp1
                        e12 *= fp1
                        e21 *= fp2
                        e22 *= fp2
                    ew11[i, j] = e11
                    ew12[i, j] = e12
                    ew21[i, j] = e21
                    ew22[i, j] = e22
            pre_c1[i] = z1
            pre_c2[i] = z2
            if nonlinear:
                h_c1[i] = _act(act, z1)
                h_c2[i] = _act(act, z2)
            else:
                h_c1[i] = z1
                h_c2[i] = z2


def blockdiag_fused_step(double[::1] a, double[::1] b, double[::1] c, double[::1] d,
                         double[::1] scale,
                         double[:, ::1] w_c1, double[:, ::1] w_c2, double[::1] x,
                         double[::1] h_c1, double[::1] h_c2,
                         double[::1] e_a_c1, double[::1] e_a_c2,
                         double[::1] e_b_c1, double[::1] e_b_c2,
                         double[::1] e_c_c1, double[::1] e_c_c2,
                         double[::1] e_d_c1, double[::1] e_d_c2,
                         double[:, ::1] ew11, double[:, ::1] ew12,
                         double[:, ::1] ew21, double[:, ::1] ew22,
                         bint update_traces):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t dim = x.shape[0]
    cdef Py_ssize_t i, j
    cdef double u1, u2, h1, h2, ai, bi, ci, di, si, xj
    cdef double t1, t2, e11, e12, e21, e22
    with nogil:
        for i in range(n):
            u1 = 0.0
            u2 = 0.0
            for j in range(dim):
                u1 += w_c1[i, j] * x[j]
                u2 += w_c2[i, j] * x[j]
            si = scale[i]
            u1 *= si
            u2 *= si
            h1 = h_c1[i]
            h2 = h_c2[i]
            ai = a[i]
            bi = b[i]
            ci = c[i]
            di = d[i]
            if update_traces:
                t1 = h1 + ai * e_a_c1[i] + bi * e_a_c2[i]
                t2 = ci * e_a_c1[i] + di * e_a_c2[i]
                e_a_c1[i] = t1
                e_a_c2[i] = t2
                t1 = h2 + ai * e_b_c1[i] + bi * e_b_c2[i]
                t2 = ci * e_b_c1[i] + di * e_b_c2[i]
                e_b_c1[i] = t1
                e_b_c2[i] = t2
                t1 = ai * e_c_c1[i] + bi * e_c_c2[i]
                t2 = h1 + ci * e_c_c1[i] + di * e_c_c2[i]
                e_c_c1[i] = t1
                e_c_c2[i] = t2
                t1 = ai * e_d_c1[i] + bi * e_d_c2[i]
                t2 = h2 + ci * e_d_c1[i] + di * e_d_c2[i]
                e_d_c1[i] = t1
                e_d_c2[i] = t2
                for j in range(dim):
                    xj = x[j]
                    e11 = ai * ew11[i, j] + bi * ew21[i, j] + si * xj
                    e21 = ci * ew11[i, j] + di * ew21[i, j]
                    e12 = ai * ew12[i, j] + bi * ew22[i, j]
                    e22 = ci * ew12[i, j] + di * ew22[i, j] + si * xj
                    ew11[i, j] = e11
                    ew12[i, j] = e12
                    ew21[i, j] = e21
                    ew22[i, j] = e22
            h_c1[i] = ai * h1 + bi * h2 + u1
            h_c2[i] = ci * h1 + di * h2 + u2


def array_probe_sum(g):
    """Sum of all entries; NaN/inf propagate, so a finite result certifies a
    finite array (used to gate updates cheaply)."""
    cdef double[::1] flat = g.reshape(-1)
    cdef Py_ssize_t i
    cdef double total = 0.0
    with nogil:
        for i in range(flat.shape[0]):
            total += flat[i]
    return total


def adam_array_step(p, g, m, v, double lr, double beta1, double beta2,
                    double eps, double bc1, double bc2):
    """Fused in-place Adam update for one parameter array."""
    cdef double[::1] pf = p.reshape(-1)
    cdef double[::1] gf = g.reshape(-1)
    cdef double[::1] mf = m.reshape(-1)
    cdef double[::1] vf = v.reshape(-1)
    cdef Py_ssize_t i
    cdef double gi, mi, vi
    with nogil:
        for i in range(pf.shape[0]):
            gi = gf[i]
            mi = beta1 * mf[i] + (1.0 - beta1) * gi
            vi = beta2 * vf[i] + (1.0 - beta2) * gi * gi
            mf[i] = mi
            vf[i] = vi
            pf[i] -= lr * (mi / bc1) / (csqrt(vi / bc2) + eps)


def rtu_window_forward(bint nonlinear, int act,
                       double[::1] g, double[::1] phi, double[::1] gamma,
                       double[:, ::1] w_c1, double[:, ::1] w_c2, double[:, ::1] xs,
                       double[::1] h0_c1, double[::1] h0_c2,
                       double[:, ::1] hs_c1, double[:, ::1] hs_c2,
                       double[:, ::1] pres_c1, double[:, ::1] pres_c2,
                       double[:, ::1] us_c1, double[:, ::1] us_c2):
    cdef Py_ssize_t T = xs.shape[0]
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t d = xs.shape[1]
    cdef Py_ssize_t t, i, j
    cdef double u1, u2, z1, z2
    with nogil:
        for i in range(n):
            hs_c1[0, i] = h0_c1[i]
            hs_c2[0, i] = h0_c2[i]
        for t in range(T):
            for i in range(n):
                u1 = 0.0
                u2 = 0.0
                for j in range(d):
                    u1 += w_c1[i, j] * xs[t, j]
                    u2 += w_c2[i, j] * xs[t, j]
                us_c1[t, i] = u1
                us_c2[t, i] = u2
                z1 = g[i] * hs_c1[t, i] - phi[i] * hs_c2[t, i] + gamma[i] * u1
                z2 = g[i] * hs_c2[t, i] + phi[i] * hs_c1[t, i] + gamma[i] * u2
                pres_c1[t, i] = z1
                pres_c2[t, i] = z2
                if nonlinear:
                    hs_c1[t + 1, i] = _act(act, z1)
                    hs_c2[t + 1, i] = _act(act, z2)
                else:
                    hs_c1[t + 1, i] = z1
                    hs_c2[t + 1, i] = z2


def rtu_window_backward(bint nonlinear, int act,
                        double[::1] g, double[::1] phi, double[::1] gamma,
                        double[::1] dg_nu, double[::1] dphi_nu,
                        double[::1] dg_th, double[::1] dphi_th, double[::1] dgamma_nu,
                        double[:, ::1] xs,
                        double[:, ::1] hs_c1, double[:, ::1] hs_c2,
                        double[:, ::1] pres_c1, double[:, ::1] pres_c2,
                        double[:, ::1] us_c1, double[:, ::1] us_c2,
                        double[::1] d_c1, double[::1] d_c2,
                        double[::1] out_nu, double[::1] out_th,
                        double[:, ::1] out_w1, double[:, ::1] out_w2):
    cdef Py_ssize_t T = xs.shape[0]
    cdef Py_ssize_t n = d_c1.shape[0]
    cdef Py_ssize_t d = xs.shape[1]
    cdef Py_ssize_t t, i, j
    cdef double dz1, dz2, dh1_new, dh2_new, gdz1, gdz2
    acc_g_arr = np.zeros(n)
    acc_phi_arr = np.zeros(n)
    acc_gamma_arr = np.zeros(n)
    dh1_arr = np.array(d_c1, dtype=np.float64, copy=True)
    dh2_arr = np.array(d_c2, dtype=np.float64, copy=True)
    cdef double[::1] acc_g = acc_g_arr
    cdef double[::1] acc_phi = acc_phi_arr
    cdef double[::1] acc_gamma = acc_gamma_arr
    cdef double[::1] dh1 = dh1_arr
    cdef double[::1] dh2 = dh2_arr
    with nogil:
        for i in range(n):
            out_nu[i] = 0.0
            out_th[i] = 0.0
            for j in range(d):
                out_w1[i, j] = 0.0
                out_w2[i, j] = 0.0
        for t in range(T - 1, -1, -1):
            for i in range(n):
                if nonlinear:
                    dz1 = _act_deriv(act, pres_c1[t, i]) * dh1[i]
                    dz2 = _act_deriv(act, pres_c2[t, i]) * dh2[i]
                else:
                    dz1 = dh1[i]
                    dz2 = dh2[i]
                acc_g[i] += dz1 * hs_c1[t, i] + dz2 * hs_c2[t, i]
                acc_phi[i] += dz2 * hs_c1[t, i] - dz1 * hs_c2[t, i]
                acc_gamma[i] += dz1 * us_c1[t, i] + dz2 * us_c2[t, i]
                gdz1 = gamma[i] * dz1
                gdz2 = gamma[i] * dz2
                for j in range(d):
                    out_w1[i, j] += gdz1 * xs[t, j]
                    out_w2[i, j] += gdz2 * xs[t, j]
                dh1_new = g[i] * dz1 + phi[i] * dz2
                dh2_new = g[i] * dz2 - phi[i] * dz1
                dh1[i] = dh1_new
                dh2[i] = dh2_new
        for i in range(n):
            out_nu[i] = acc_g[i] * dg_nu[i] + acc_phi[i] * dphi_nu[i] + acc_gamma[i] * dgamma_nu[i]
            out_th[i] = acc_g[i] * dg_th[i] + acc_phi[i] * dphi_th[i]
