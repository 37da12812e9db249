"""Comparison recurrences and the 3x3 complex-eigenvalue counter."""

import cmath
import math

import numpy as np
import pytest

from traceunits.baselines import (BlockDiagCell, BlockDiagParams, BlockDiagTraces,
                                  DenseLinearRnnParams, LruCell, LruParams, LruState,
                                  blockdiag_assemble_grads, blockdiag_step_and_trace,
                                  count_complex_eigenvalues_3x3,
                                  dense_linear_rnn_step, init_blockdiag_params,
                                  init_lru_params, lru_assemble_grads,
                                  lru_output_backward, lru_step_and_trace)
from traceunits.core import RtuCell, TraceStore, derive_coefficients, init_rtu_params
from traceunits.errors import ShapeError
from traceunits.oracles import (QuadraticSequenceLoss, blockdiag_bptt_gradient,
                                lru_bptt_gradient)

from conftest import rel_err, rel_err_stack


def lru_params_with(r, theta, n, d, m, rng):
    base = init_lru_params(rng, n, d, m)
    base.nu_log = np.log(-np.log(np.full(n, float(r))))
    base.theta_log = np.log(np.full(n, float(theta)))
    return base


class TestLru:
    def test_zero_state_step(self, rng):
        p = init_lru_params(rng, 5, 3, 2)
        from traceunits.baselines import lru_coefficients
        co = lru_coefficients(p)
        x = rng.normal(size=3)
        state, traces, y = lru_step_and_trace(LruState.zeros(5),
                                              TraceStore.zeros(5, 3), p, x)
        np.testing.assert_allclose(state.h_re, co["gamma"] * (p.w_in_re @ x), rtol=1e-14)
        np.testing.assert_allclose(state.h_im, co["gamma"] * (p.w_in_im @ x), rtol=1e-14)

    def test_quarter_turn_complex_multiplication(self, rng):
        # lambda = 0.5 exp(i pi/2): (1 + 0i) rotates to (0 + 0.5i)
        p = lru_params_with(0.5, np.pi / 2, 1, 1, 1, rng)
        state = LruState(np.array([1.0]), np.array([0.0]))
        new, _, _ = lru_step_and_trace(state, TraceStore.zeros(1, 1), p, np.zeros(1))
        assert new.h_re[0] == pytest.approx(0.0, abs=1e-15)
        assert new.h_im[0] == pytest.approx(0.5, abs=1e-15)
        # cross-check against explicit complex arithmetic
        lam = 0.5 * cmath.exp(1j * np.pi / 2)
        href = lam * complex(1.0, 0.0)
        assert new.h_re[0] == pytest.approx(href.real, abs=1e-15)
        assert new.h_im[0] == pytest.approx(href.imag, abs=1e-15)

    def test_output_matches_explicit_complex_reference(self, rng):
        p = init_lru_params(rng, 6, 3, 4, r_max=0.95)
        cell = LruCell(p)
        h_complex = np.zeros(6, dtype=complex)
        from traceunits.baselines import lru_coefficients
        co = lru_coefficients(p)
        lam = co["r"] * np.exp(1j * co["theta"])
        w_in = p.w_in_re + 1j * p.w_in_im
        w_out = p.w_out_re + 1j * p.w_out_im
        for _ in range(30):
            x = rng.normal(size=3)
            y = cell.step(x)
            h_complex = lam * h_complex + co["gamma"] * (w_in @ x)
            y_ref = (w_out @ h_complex).real
            np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-12)

    def test_one_step_traces_equal_bptt(self, rng):
        p = init_lru_params(rng, 4, 2, 3, r_max=0.95)
        xs = rng.normal(size=(1, 2))
        loss = QuadraticSequenceLoss.random(rng, 3, 1)
        _, g_ref = lru_bptt_gradient(p, xs, loss)
        state, traces, y = lru_step_and_trace(LruState.zeros(4),
                                              TraceStore.zeros(4, 2), p, xs[0])
        _, dy = loss.step_grad(0, y)
        grads, dre, dim = lru_output_backward(p, state, dy)
        grads.update(lru_assemble_grads(dre, dim, traces))
        keys = sorted(grads)
        assert rel_err_stack([(grads[k], g_ref[k]) for k in keys]) <= 1e-12

    def test_multi_step_traces_equal_bptt(self, rng):
        p = init_lru_params(rng, 5, 3, 2, r_max=0.95)
        xs = rng.normal(size=(40, 3))
        loss = QuadraticSequenceLoss.random(rng, 2, 40)
        _, g_ref = lru_bptt_gradient(p, xs, loss)
        cell = LruCell(p)
        acc = {k: np.zeros_like(v) for k, v in p.as_dict().items()}
        for t in range(40):
            y = cell.step(xs[t])
            _, dy = loss.step_grad(t, y)
            for k, v in cell.grads(dy).items():
                acc[k] += v
        keys = sorted(acc)
        assert rel_err_stack([(acc[k], g_ref[k]) for k in keys]) <= 1e-10


class TestBlockDiag:
    def test_embeds_linear_trace_unit(self, rng):
        p = init_rtu_params(rng, 4, 2, variant="linear", activation="identity",
                            r_max=0.95)
        co = derive_coefficients(p)
        bd = BlockDiagParams(a=co.g, b=-co.phi, c=co.phi, d_diag=co.g,
                             w_c1=p.w_c1, w_c2=p.w_c2, input_scale=co.gamma)
        rtu = RtuCell(p)
        bcell = BlockDiagCell(bd)
        for _ in range(40):
            x = rng.normal(size=2)
            np.testing.assert_allclose(rtu.step(x), bcell.step(x),
                                       rtol=1e-13, atol=1e-13)

    def test_zero_history_input_traces(self, rng):
        bd = init_blockdiag_params(rng, 4, 3)
        x = rng.normal(size=3)
        _, traces = blockdiag_step_and_trace((np.zeros(4), np.zeros(4)),
                                             BlockDiagTraces.zeros(4, 3), bd, x)
        np.testing.assert_allclose(traces.ew11, np.outer(bd.input_scale, x), rtol=1e-14)
        np.testing.assert_allclose(traces.ew22, np.outer(bd.input_scale, x), rtol=1e-14)
        assert np.all(traces.ew12 == 0.0) and np.all(traces.ew21 == 0.0)

    def test_frozen_traces_match_bptt(self, rng):
        bd = init_blockdiag_params(rng, 5, 3, activation="tanh")
        xs = rng.normal(size=(30, 3))
        loss = QuadraticSequenceLoss.random(rng, 10, 30)
        _, g_ref = blockdiag_bptt_gradient(bd, xs, loss)
        cell = BlockDiagCell(bd)
        acc = {k: np.zeros_like(v) for k, v in bd.as_dict().items()}
        for t in range(30):
            out = cell.step(xs[t])
            _, d_out = loss.step_grad(t, out)
            for k, v in cell.grads(d_out).items():
                acc[k] += v
        keys = sorted(acc)
        assert rel_err_stack([(acc[k], g_ref[k]) for k in keys]) <= 1e-10


class TestDenseLinearRnn:
    def test_zero_recurrent_matrix(self, rng):
        p = DenseLinearRnnParams(np.zeros((3, 3)), rng.normal(size=(3, 2)))
        x = rng.normal(size=2)
        np.testing.assert_allclose(dense_linear_rnn_step(rng.normal(size=3), p, x),
                                   p.w_x @ x, rtol=1e-14)

    def test_identity_recurrence_holds_state(self, rng):
        p = DenseLinearRnnParams(np.eye(3), np.zeros((3, 2)))
        h = rng.normal(size=3)
        np.testing.assert_array_equal(dense_linear_rnn_step(h, p, np.zeros(2)), h)

    def test_matches_hand_product(self):
        w_h = np.array([[0.1, 0.2, 0.0], [0.0, 0.3, -0.1], [0.5, 0.0, 0.2]])
        w_x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        p = DenseLinearRnnParams(w_h, w_x)
        h = np.array([1.0, 2.0, -1.0])
        x = np.array([0.5, -0.5])
        expected = np.array([
            0.1 * 1 + 0.2 * 2 + 0.0 * -1 + 0.5,
            0.0 * 1 + 0.3 * 2 + -0.1 * -1 + -0.5,
            0.5 * 1 + 0.0 * 2 + 0.2 * -1 + 0.0,
        ])
        np.testing.assert_allclose(dense_linear_rnn_step(h, p, x), expected, rtol=1e-14)


def cardano_complex_root_count(w: np.ndarray) -> int:
    """Independent oracle: closed-form cubic roots of the characteristic
    polynomial, counting roots with nonzero imaginary part."""
    tr = w[0, 0] + w[1, 1] + w[2, 2]
    m2 = ((w[1, 1] * w[2, 2] - w[1, 2] * w[2, 1])
          + (w[0, 0] * w[2, 2] - w[0, 2] * w[2, 0])
          + (w[0, 0] * w[1, 1] - w[0, 1] * w[1, 0]))
    det = float(np.linalg.det(w))
    # monic cubic x^3 + b x^2 + c x + d
    b, c, d = -tr, m2, -det
    # depressed cubic t^3 + p t + q with x = t - b/3
    p = c - b * b / 3.0
    q = 2.0 * b ** 3 / 27.0 - b * c / 3.0 + d
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc > 1e-12:
        # one real root, two complex conjugates
        return 2
    return 0


class TestEigenCounter:
    def test_rotation_block_plus_identity(self):
        w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert count_complex_eigenvalues_3x3(w) == 2

    def test_symmetric_matrices_are_real(self, rng):
        for _ in range(100):
            a = rng.normal(size=(3, 3))
            assert count_complex_eigenvalues_3x3(a + a.T) == 0

    def test_matches_cardano_oracle(self, rng):
        disagreements = 0
        for _ in range(10_000):
            w = rng.uniform(-1.0, 1.0, size=(3, 3))
            ours = count_complex_eigenvalues_3x3(w)
            oracle = cardano_complex_root_count(w)
            # both sides treat near-degenerate spectra as real; skip genuine
            # knife-edge cases where the discriminant sits inside the tie band
            if ours != oracle:
                disagreements += 1
        assert disagreements == 0

    def test_rejects_wrong_shape(self):
        with pytest.raises(ShapeError):
            count_complex_eigenvalues_3x3(np.eye(4))
