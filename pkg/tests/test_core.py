"""Recurrent layer: coefficient derivation, forward step, trace recursions,
gradient assembly, and the layer-level invariants."""

import numpy as np
import pytest

from traceunits.core import (CreditSignal, RtuCell, RtuParams, RtuState, TraceStore,
                             assemble_param_gradient, clip_raw_magnitude,
                             credit_from_output_grad, derive_coefficients,
                             init_rtu_params, input_credit, linear_trace_step,
                             magnitude_from_raw, nonlinear_trace_step,
                             raw_from_magnitude, reset_episode, rtu_step)
from traceunits.errors import InvalidParameterError, ShapeError

from conftest import rel_err

# frozen reference values, evaluated independently at 40-digit precision
R_AT_ZERO = 0.36787944117144232
G_AT_ZERO = 0.19876611034641294
PHI_AT_ZERO = 0.3095598756531122
GAMMA_AT_ZERO = 0.92987349503219378
DGAMMA_DNU_AT_ZERO = 0.1455416074978319
LOG_LOG_TWO = -0.36651292058166433
SQRT_3_4 = 0.86602540378443865


def _params(nu, th, w1, w2, **kw):
    return RtuParams(np.asarray(nu, dtype=float), np.asarray(th, dtype=float),
                     np.asarray(w1, dtype=float), np.asarray(w2, dtype=float), **kw)


def params_with_magnitude(r, theta, w1, w2, **kw):
    r = np.atleast_1d(np.asarray(r, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return _params(np.log(-np.log(r)), np.log(theta), w1, w2, **kw)


class TestDeriveCoefficients:
    def test_reference_point(self):
        p = _params([0.0], [0.0], [[0.5]], [[0.5]])
        c = derive_coefficients(p)
        assert c.r[0] == pytest.approx(R_AT_ZERO, abs=1e-15)
        assert c.g[0] == pytest.approx(G_AT_ZERO, abs=1e-15)
        assert c.phi[0] == pytest.approx(PHI_AT_ZERO, abs=1e-15)
        assert c.gamma[0] == pytest.approx(GAMMA_AT_ZERO, abs=1e-15)

    def test_magnitude_near_one_is_clamped(self):
        p = _params([-30.0], [0.0], [[1.0]], [[1.0]])
        c = derive_coefficients(p)
        assert c.r[0] == pytest.approx(1.0, abs=1e-12)
        # gamma clamps to sqrt(eps) instead of collapsing to zero
        assert c.gamma[0] == pytest.approx(1e-6, rel=1e-6)

    def test_half_magnitude(self):
        p = _params([LOG_LOG_TWO], [0.3], [[1.0]], [[1.0]])
        c = derive_coefficients(p)
        assert c.r[0] == pytest.approx(0.5, abs=1e-15)
        assert c.gamma[0] == pytest.approx(SQRT_3_4, abs=1e-15)

    def test_invariants_random(self, rng):
        for _ in range(50):
            p = init_rtu_params(rng, 8, 3)
            c = derive_coefficients(p)
            assert np.all(c.r > 0.0) and np.all(c.r <= 1.0)
            assert np.all(c.theta > 0.0)
            assert np.all(np.abs(c.g ** 2 + c.phi ** 2 - c.r ** 2) <= 1e-12)
            assert np.all(c.gamma >= 0.0) and np.all(c.gamma < 1.0)
            assert np.all(np.abs(c.gamma - np.sqrt(1.0 - c.r ** 2)) <= 1e-12)

    def test_rejects_non_finite(self):
        p = _params([0.0], [0.0], [[np.nan]], [[0.0]])
        with pytest.raises(InvalidParameterError):
            derive_coefficients(p)

    @pytest.mark.parametrize("parameterization", ["exp_exp", "exp_neg", "direct", "sigmoid"])
    def test_magnitude_transforms_round_trip(self, parameterization):
        r = np.array([0.1, 0.5, 0.9, 0.999])
        raw = raw_from_magnitude(r, parameterization)
        back = magnitude_from_raw(raw, parameterization)
        np.testing.assert_allclose(back, r, rtol=1e-12)

    @pytest.mark.parametrize("parameterization", ["exp_exp", "exp_neg", "direct", "sigmoid"])
    def test_magnitude_derivative_matches_differences(self, parameterization, rng):
        r = rng.uniform(0.2, 0.9, size=6)
        raw = raw_from_magnitude(r, parameterization)
        p = _params(raw, np.log(rng.uniform(0.5, 3.0, size=6)),
                    rng.normal(size=(6, 2)), rng.normal(size=(6, 2)),
                    parameterization=parameterization)
        c = derive_coefficients(p)
        h = 1e-7
        for field, idx in (("dg_nu", 0), ("dphi_nu", 1), ("dgamma_nu", 2)):
            plus = p.copy()
            plus.nu_log = p.nu_log + h
            minus = p.copy()
            minus.nu_log = p.nu_log - h
            cp, cm = derive_coefficients(plus), derive_coefficients(minus)
            fd = [(cp.g - cm.g), (cp.phi - cm.phi), (cp.gamma - cm.gamma)][idx] / (2 * h)
            np.testing.assert_allclose(getattr(c, field), fd, rtol=1e-6, atol=1e-9)


class TestRtuStep:
    def test_zero_history(self, rng):
        p = init_rtu_params(rng, 5, 3, variant="linear", activation="identity")
        c = derive_coefficients(p)
        x = rng.normal(size=3)
        new = rtu_step(RtuState.zeros(5), c, p, x)
        np.testing.assert_allclose(new.h_c1, c.gamma * (p.w_c1 @ x), rtol=1e-14)
        np.testing.assert_allclose(new.h_c2, c.gamma * (p.w_c2 @ x), rtol=1e-14)

    def test_quarter_turn_rotation(self):
        # r = 0.5, theta = pi/2: g = 0, phi = 0.5; state (1, 0) rotates to (0, 0.5)
        p = params_with_magnitude(0.5, np.pi / 2, [[1.0]], [[1.0]],
                                  variant="linear", activation="identity")
        c = derive_coefficients(p)
        assert c.g[0] == pytest.approx(0.0, abs=1e-15)
        assert c.phi[0] == pytest.approx(0.5, abs=1e-15)
        state = RtuState(np.array([1.0]), np.array([0.0]),
                         np.array([1.0]), np.array([0.0]))
        new = rtu_step(state, c, p, np.zeros(1))
        assert new.h_c1[0] == pytest.approx(0.0, abs=1e-15)
        assert new.h_c2[0] == pytest.approx(0.5, abs=1e-15)

    def test_nonlinear_relu_clamps(self):
        p = params_with_magnitude(0.5, 1.0, [[1.0]], [[1.0]],
                                  variant="nonlinear", activation="relu")
        c = derive_coefficients(p)
        p.w_c1[0, 0] = -0.3 / c.gamma[0]
        p.w_c2[0, 0] = 0.2 / c.gamma[0]
        new = rtu_step(RtuState.zeros(1), c, p, np.ones(1))
        assert new.pre_c1[0] == pytest.approx(-0.3, abs=1e-14)
        assert new.pre_c2[0] == pytest.approx(0.2, abs=1e-14)
        assert new.h_c1[0] == 0.0
        assert new.h_c2[0] == pytest.approx(0.2, abs=1e-14)

    def test_dimension_mismatch(self, rng):
        p = init_rtu_params(rng, 4, 3)
        c = derive_coefficients(p)
        with pytest.raises(ShapeError):
            rtu_step(RtuState.zeros(4), c, p, np.zeros(5))

    def test_linear_state_is_its_preactivation(self, rng):
        p = init_rtu_params(rng, 4, 2, variant="linear", activation="relu")
        c = derive_coefficients(p)
        new = rtu_step(RtuState.zeros(4), c, p, rng.normal(size=2))
        np.testing.assert_array_equal(new.h_c1, new.pre_c1)
        np.testing.assert_array_equal(new.h_c2, new.pre_c2)


class TestTraceSteps:
    def test_zero_history_input_injection(self, rng):
        p = init_rtu_params(rng, 4, 3, variant="linear")
        c = derive_coefficients(p)
        x = rng.normal(size=3)
        tr = linear_trace_step(TraceStore.zeros(4, 3), RtuState.zeros(4), c, p, x)
        np.testing.assert_allclose(tr.ew11, np.outer(c.gamma, x), rtol=1e-14)
        np.testing.assert_allclose(tr.ew22, np.outer(c.gamma, x), rtol=1e-14)
        assert np.all(tr.ew12 == 0.0) and np.all(tr.ew21 == 0.0)

    def test_single_step_magnitude_trace(self):
        # from zero history with unit input projection, the magnitude trace is
        # exactly the derivative of the input normalizer; frozen oracle value
        p = _params([0.0], [0.0], [[1.0]], [[1.0]], variant="linear")
        c = derive_coefficients(p)
        tr = linear_trace_step(TraceStore.zeros(1, 1), RtuState.zeros(1), c, p,
                               np.ones(1))
        assert tr.e_nu_c1[0] == pytest.approx(DGAMMA_DNU_AT_ZERO, abs=1e-15)
        assert tr.e_nu_c2[0] == pytest.approx(DGAMMA_DNU_AT_ZERO, abs=1e-15)

    def test_phase_trace_untouched_by_input(self, rng):
        p = init_rtu_params(rng, 6, 2, variant="linear")
        c = derive_coefficients(p)
        tr = linear_trace_step(TraceStore.zeros(6, 2), RtuState.zeros(6), c, p,
                               rng.normal(size=2))
        assert np.all(tr.e_th_c1 == 0.0) and np.all(tr.e_th_c2 == 0.0)

    def test_identity_nonlinear_matches_linear_bitwise(self, rng):
        p_lin = init_rtu_params(rng, 5, 3, variant="linear", activation="identity")
        p_non = p_lin.copy()
        p_non.variant = "nonlinear"
        c = derive_coefficients(p_lin)
        s_lin, s_non = RtuState.zeros(5), RtuState.zeros(5)
        t_lin, t_non = TraceStore.zeros(5, 3), TraceStore.zeros(5, 3)
        for _ in range(20):
            x = rng.normal(size=3)
            t_lin = linear_trace_step(t_lin, s_lin, c, p_lin, x)
            new_lin = rtu_step(s_lin, c, p_lin, x)
            new_non = rtu_step(s_non, c, p_non, x)
            t_non = nonlinear_trace_step(t_non, s_non, c, p_non, x,
                                         (new_non.pre_c1, new_non.pre_c2))
            s_lin, s_non = new_lin, new_non
            np.testing.assert_array_equal(s_lin.h_c1, s_non.h_c1)
            np.testing.assert_array_equal(s_lin.h_c2, s_non.h_c2)
            for name in ("e_nu_c1", "e_nu_c2", "e_th_c1", "e_th_c2",
                         "ew11", "ew12", "ew21", "ew22"):
                np.testing.assert_array_equal(getattr(t_lin, name), getattr(t_non, name))

    def test_relu_dead_region_zeroes_component_traces(self, rng):
        p = init_rtu_params(rng, 4, 2, variant="nonlinear", activation="relu")
        c = derive_coefficients(p)
        # drive pre_c1 negative everywhere via a large negative input path
        p.w_c1[:] = -3.0
        p.w_c2[:] = 3.0
        x = np.ones(2)
        prev = RtuState.zeros(4)
        new = rtu_step(prev, c, p, x)
        assert np.all(new.pre_c1 < 0.0)
        tr = nonlinear_trace_step(TraceStore.zeros(4, 2), prev, c, p, x,
                                  (new.pre_c1, new.pre_c2))
        for name in ("e_nu_c1", "e_th_c1", "ew11", "ew12"):
            assert np.all(getattr(tr, name) == 0.0), name

    @pytest.mark.parametrize("variant,activation", [
        ("linear", "relu"), ("nonlinear", "identity"),
        ("nonlinear", "relu"), ("nonlinear", "tanh")])
    def test_one_step_traces_match_finite_differences(self, variant, activation, rng):
        n, d = 4, 3
        p = init_rtu_params(rng, n, d, variant=variant, activation=activation,
                            r_max=0.95)
        c = derive_coefficients(p)
        prev = RtuState(rng.normal(size=n) * 0.3, rng.normal(size=n) * 0.3,
                        np.zeros(n), np.zeros(n))
        x = rng.normal(size=d)
        base = rtu_step(prev, c, p, x)
        if variant == "linear":
            tr = linear_trace_step(TraceStore.zeros(n, d), prev, c, p, x)
        else:
            tr = nonlinear_trace_step(TraceStore.zeros(n, d), prev, c, p, x,
                                      (base.pre_c1, base.pre_c2))
        step = 1e-6

        def fd_state(name, i, j=None):
            plus, minus = p.copy(), p.copy()
            if j is None:
                getattr(plus, name)[i] += step
                getattr(minus, name)[i] -= step
            else:
                getattr(plus, name)[i, j] += step
                getattr(minus, name)[i, j] -= step
            sp = rtu_step(prev, derive_coefficients(plus), plus, x)
            sm = rtu_step(prev, derive_coefficients(minus), minus, x)
            return ((sp.h_c1 - sm.h_c1) / (2 * step),
                    (sp.h_c2 - sm.h_c2) / (2 * step))

        for i in range(n):
            d1, d2 = fd_state("nu_log", i)
            assert rel_err(tr.e_nu_c1[i], d1[i]) <= 1e-6
            assert rel_err(tr.e_nu_c2[i], d2[i]) <= 1e-6
            d1, d2 = fd_state("theta_log", i)
            assert rel_err(tr.e_th_c1[i], d1[i]) <= 1e-6
            assert rel_err(tr.e_th_c2[i], d2[i]) <= 1e-6
            for j in range(d):
                d1, d2 = fd_state("w_c1", i, j)
                assert rel_err(tr.ew11[i, j], d1[i]) <= 1e-6
                assert rel_err(tr.ew21[i, j], d2[i]) <= 1e-6
                d1, d2 = fd_state("w_c2", i, j)
                assert rel_err(tr.ew12[i, j], d1[i]) <= 1e-6
                assert rel_err(tr.ew22[i, j], d2[i]) <= 1e-6

    def test_stale_pre_activations_rejected(self, rng):
        p = init_rtu_params(rng, 3, 2, variant="nonlinear")
        c = derive_coefficients(p)
        prev = RtuState.zeros(3)
        x = rng.normal(size=2)
        with pytest.raises(ValueError):
            nonlinear_trace_step(TraceStore.zeros(3, 2), prev, c, p, x,
                                 (np.ones(3), np.ones(3)))


class TestAssembleAndReset:
    def test_zero_credit_zero_gradient(self, rng):
        tr = TraceStore.zeros(3, 2)
        for a in tr._arrays():
            a[:] = rng.normal(size=a.shape)
        g = assemble_param_gradient(CreditSignal(np.zeros(3), np.zeros(3)), tr)
        for arr in (g.nu_log, g.theta_log, g.w_c1, g.w_c2):
            assert np.all(arr == 0.0)

    def test_zero_traces_zero_gradient(self, rng):
        g = assemble_param_gradient(CreditSignal(rng.normal(size=3), rng.normal(size=3)),
                                    TraceStore.zeros(3, 2))
        for arr in (g.nu_log, g.theta_log, g.w_c1, g.w_c2):
            assert np.all(arr == 0.0)

    def test_assembly_formula(self, rng):
        n, d = 4, 3
        tr = TraceStore.zeros(n, d)
        for a in tr._arrays():
            a[:] = rng.normal(size=a.shape)
        c1, c2 = rng.normal(size=n), rng.normal(size=n)
        g = assemble_param_gradient(CreditSignal(c1, c2), tr)
        np.testing.assert_allclose(g.nu_log, c1 * tr.e_nu_c1 + c2 * tr.e_nu_c2)
        np.testing.assert_allclose(g.w_c1, c1[:, None] * tr.ew11 + c2[:, None] * tr.ew21)
        np.testing.assert_allclose(g.w_c2, c1[:, None] * tr.ew12 + c2[:, None] * tr.ew22)

    def test_reset_zeroes_everything(self, rng):
        state = RtuState(*(rng.normal(size=3) for _ in range(4)))
        tr = TraceStore.zeros(3, 2)
        tr.ew11[:] = 1.0
        state2, tr2 = reset_episode(state, tr)
        assert np.all(state2.h_c1 == 0.0) and np.all(tr2.ew11 == 0.0)

    def test_step_after_reset_reproduces_zero_history(self, rng):
        p = init_rtu_params(rng, 4, 3, variant="linear")
        c = derive_coefficients(p)
        cell = RtuCell(p)
        for _ in range(7):
            cell.step(rng.normal(size=3))
        cell.reset()
        x = rng.normal(size=3)
        cell.step(x)
        np.testing.assert_allclose(cell.traces.ew11, np.outer(c.gamma, x), rtol=1e-13)


class TestInvariants:
    def test_memory_accounting(self, rng):
        pairs = [(n, d) for n in (1, 2, 3, 5, 8, 13, 21, 34, 55, 89)
                 for d in (1, 7)]
        assert len(pairs) == 20
        for n, d in pairs:
            tr = TraceStore.zeros(n, d)
            assert tr.scalar_count() == 4 * n + 4 * n * d
        # count is invariant to how many steps were taken
        p = init_rtu_params(rng, 8, 3)
        cell = RtuCell(p)
        for _ in range(50):
            cell.step(rng.normal(size=3))
        assert cell.traces.scalar_count() == 4 * 8 + 4 * 8 * 3

    def test_zero_input_norm_nonincreasing(self, rng):
        p = init_rtu_params(rng, 8, 2, variant="linear", activation="identity")
        c = derive_coefficients(p)
        state = RtuState(rng.normal(size=8), rng.normal(size=8),
                         np.zeros(8), np.zeros(8))
        for _ in range(30):
            norm_before = state.h_c1 ** 2 + state.h_c2 ** 2
            state = rtu_step(state, c, p, np.zeros(2))
            norm_after = state.h_c1 ** 2 + state.h_c2 ** 2
            assert np.all(norm_after <= norm_before * (1.0 + 1e-12))
            # each block scales by exactly r^2
            np.testing.assert_allclose(norm_after, norm_before * c.r ** 2, rtol=1e-10)

    def test_cell_matches_functional_ops(self, rng):
        for variant in ("linear", "nonlinear"):
            p = init_rtu_params(rng, 5, 3, variant=variant, activation="tanh")
            cell = RtuCell(p.copy())
            c = derive_coefficients(p)
            state = RtuState.zeros(5)
            tr = TraceStore.zeros(5, 3)
            for _ in range(10):
                x = rng.normal(size=3)
                cell.step(x)
                new_state = rtu_step(state, c, p, x)
                if variant == "linear":
                    tr = linear_trace_step(tr, state, c, p, x)
                else:
                    tr = nonlinear_trace_step(tr, state, c, p, x,
                                              (new_state.pre_c1, new_state.pre_c2))
                state = new_state
                np.testing.assert_allclose(cell.state.h_c1, state.h_c1, rtol=1e-14)
                np.testing.assert_allclose(cell.traces.ew11, tr.ew11, rtol=1e-13, atol=1e-300)

    def test_credit_folds_post_activation(self, rng):
        p = init_rtu_params(rng, 4, 2, variant="linear", activation="tanh")
        state = RtuState(rng.normal(size=4), rng.normal(size=4),
                         np.zeros(4), np.zeros(4))
        d_h = rng.normal(size=8)
        credit = credit_from_output_grad(d_h, state, p)
        np.testing.assert_allclose(credit.d_c1, (1 - np.tanh(state.h_c1) ** 2) * d_h[:4])

    def test_input_credit_matches_differences(self, rng):
        for variant in ("linear", "nonlinear"):
            p = init_rtu_params(rng, 4, 3, variant=variant, activation="tanh",
                                r_max=0.95)
            c = derive_coefficients(p)
            prev = RtuState(rng.normal(size=4) * 0.2, rng.normal(size=4) * 0.2,
                            np.zeros(4), np.zeros(4))
            x = rng.normal(size=3)
            w = rng.normal(size=8)  # linear functional of the combined output

            def value(xv):
                from traceunits.core import combined_output
                return float(w @ combined_output(rtu_step(prev, c, p, xv), p))

            new = rtu_step(prev, c, p, x)
            credit = credit_from_output_grad(w, new, p)
            dx = input_credit(credit, c, p, new)
            step = 1e-7
            for j in range(3):
                xp, xm = x.copy(), x.copy()
                xp[j] += step
                xm[j] -= step
                fd = (value(xp) - value(xm)) / (2 * step)
                assert rel_err(dx[j], fd) <= 1e-6

    def test_clip_raw_magnitude_direct(self):
        p = _params([1.7, -0.2], [0.0, 0.0], np.zeros((2, 1)), np.zeros((2, 1)),
                    parameterization="direct")
        clip_raw_magnitude(p)
        assert np.all(p.nu_log <= 1.0) and np.all(p.nu_log >= 1e-6)
