"""Backend equivalence: the compiled kernels must reproduce the reference
backend on every function, and the fused step must keep the linear and
identity-nonlinear paths bit-identical within each backend."""

import numpy as np
import pytest

from traceunits.kernels import pyref

try:
    from traceunits.kernels import _speedups
    HAVE_COMPILED = True
except ImportError:
    _speedups = None
    HAVE_COMPILED = False

needs_compiled = pytest.mark.skipif(not HAVE_COMPILED,
                                    reason="compiled backend not built")


def _coeff_arrays(rng, n):
    theta = rng.uniform(0.1, 6.0, n)
    r = rng.uniform(0.1, 0.95, n)
    return {
        "g": r * np.cos(theta), "phi": r * np.sin(theta),
        "gamma": np.sqrt(1 - r * r),
        "dg_nu": rng.normal(size=n), "dphi_nu": rng.normal(size=n),
        "dg_th": rng.normal(size=n), "dphi_th": rng.normal(size=n),
        "dgamma_nu": rng.normal(size=n),
    }


def _state(rng, n, d):
    return ([rng.normal(size=n) for _ in range(4)],
            [rng.normal(size=n) for _ in range(4)],
            [rng.normal(size=(n, d)) for _ in range(4)])


@needs_compiled
@pytest.mark.parametrize("nonlinear,act", [(False, 0), (True, 0), (True, 1), (True, 2)])
def test_fused_step_backends_agree(nonlinear, act):
    rng = np.random.default_rng(0)
    n, d = 7, 4
    co = _coeff_arrays(rng, n)
    w1, w2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    sides = []
    for impl in (pyref, _speedups):
        rng_s = np.random.default_rng(42)
        h, vec_tr, mat_tr = _state(rng_s, n, d)
        for _ in range(40):
            x = rng_s.normal(size=d)
            impl.rtu_fused_step(nonlinear, act, co["g"], co["phi"], co["gamma"],
                                co["dg_nu"], co["dphi_nu"], co["dg_th"],
                                co["dphi_th"], co["dgamma_nu"], w1, w2, x,
                                h[0], h[1], h[2], h[3],
                                vec_tr[0], vec_tr[1], vec_tr[2], vec_tr[3],
                                mat_tr[0], mat_tr[1], mat_tr[2], mat_tr[3], True)
        sides.append((h, vec_tr, mat_tr))
    for a, b in zip(sides[0], sides[1]):
        for arr_a, arr_b in zip(a, b):
            np.testing.assert_allclose(arr_a, arr_b, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_blockdiag_backends_agree():
    rng = np.random.default_rng(1)
    n, d = 6, 3
    a, b, c, dd = (rng.uniform(-0.7, 0.7, n) for _ in range(4))
    s = rng.uniform(0.5, 1.0, n)
    w1, w2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    sides = []
    for impl in (pyref, _speedups):
        rng_s = np.random.default_rng(7)
        h1, h2 = rng_s.normal(size=n), rng_s.normal(size=n)
        vec = [rng_s.normal(size=n) for _ in range(8)]
        mat = [rng_s.normal(size=(n, d)) for _ in range(4)]
        for _ in range(30):
            x = rng_s.normal(size=d)
            impl.blockdiag_fused_step(a, b, c, dd, s, w1, w2, x, h1, h2,
                                      *vec, *mat, True)
        sides.append(([h1, h2], vec, mat))
    for ga, gb in zip(sides[0], sides[1]):
        for arr_a, arr_b in zip(ga, gb):
            np.testing.assert_allclose(arr_a, arr_b, rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("nonlinear,act", [(False, 0), (True, 2)])
def test_window_kernels_backends_agree(nonlinear, act):
    rng = np.random.default_rng(2)
    n, d, T = 5, 3, 9
    co = _coeff_arrays(rng, n)
    w1, w2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    xs = rng.normal(size=(T, d))
    h0a, h0b = rng.normal(size=n), rng.normal(size=n)
    d1, d2 = rng.normal(size=n), rng.normal(size=n)
    outs = []
    for impl in (pyref, _speedups):
        hs1, hs2 = np.zeros((T + 1, n)), np.zeros((T + 1, n))
        p1, p2 = np.zeros((T, n)), np.zeros((T, n))
        u1, u2 = np.zeros((T, n)), np.zeros((T, n))
        impl.rtu_window_forward(nonlinear, act, co["g"], co["phi"], co["gamma"],
                                w1, w2, xs, h0a, h0b, hs1, hs2, p1, p2, u1, u2)
        gn, gt = np.zeros(n), np.zeros(n)
        gw1, gw2 = np.zeros((n, d)), np.zeros((n, d))
        impl.rtu_window_backward(nonlinear, act, co["g"], co["phi"], co["gamma"],
                                 co["dg_nu"], co["dphi_nu"], co["dg_th"],
                                 co["dphi_th"], co["dgamma_nu"], xs,
                                 hs1, hs2, p1, p2, u1, u2, d1, d2,
                                 gn, gt, gw1, gw2)
        outs.append((hs1, hs2, gn, gt, gw1, gw2))
    for arr_a, arr_b in zip(outs[0], outs[1]):
        np.testing.assert_allclose(arr_a, arr_b, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_adam_kernel_backends_agree():
    rng = np.random.default_rng(3)
    shapes = [(6,), (4, 5)]
    for shape in shapes:
        p_a = rng.normal(size=shape)
        g = rng.normal(size=shape)
        m_a, v_a = np.zeros(shape), np.zeros(shape)
        p_b, m_b, v_b = p_a.copy(), m_a.copy(), v_a.copy()
        for t in range(1, 20):
            bc1, bc2 = 1 - 0.9 ** t, 1 - 0.999 ** t
            pyref.adam_array_step(p_a, g, m_a, v_a, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
            _speedups.adam_array_step(p_b, g, m_b, v_b, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
        np.testing.assert_allclose(p_a, p_b, rtol=1e-13)
        np.testing.assert_allclose(v_a, v_b, rtol=1e-13)


@needs_compiled
def test_probe_sum_backends_agree():
    rng = np.random.default_rng(4)
    for arr in (rng.normal(size=17), rng.normal(size=(3, 9))):
        assert pyref.array_probe_sum(arr) == pytest.approx(
            _speedups.array_probe_sum(arr), rel=1e-12)
    bad = np.array([1.0, np.nan])
    assert not np.isfinite(pyref.array_probe_sum(bad))
    assert not np.isfinite(_speedups.array_probe_sum(bad))


@pytest.mark.parametrize("impl", [pyref] + ([_speedups] if HAVE_COMPILED else []))
def test_identity_nonlinear_bit_identical_to_linear(impl):
    rng = np.random.default_rng(5)
    n, d = 6, 3
    co = _coeff_arrays(rng, n)
    w1, w2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    states = []
    for nonlinear in (False, True):
        rng_s = np.random.default_rng(9)
        h, vec_tr, mat_tr = _state(rng_s, n, d)
        for _ in range(25):
            x = rng_s.normal(size=d)
            impl.rtu_fused_step(nonlinear, 0, co["g"], co["phi"], co["gamma"],
                                co["dg_nu"], co["dphi_nu"], co["dg_th"],
                                co["dphi_th"], co["dgamma_nu"], w1, w2, x,
                                h[0], h[1], h[2], h[3],
                                vec_tr[0], vec_tr[1], vec_tr[2], vec_tr[3],
                                mat_tr[0], mat_tr[1], mat_tr[2], mat_tr[3], True)
        states.append((h, vec_tr, mat_tr))
    for group_a, group_b in zip(states[0], states[1]):
        for arr_a, arr_b in zip(group_a, group_b):
            np.testing.assert_array_equal(arr_a, arr_b)
