"""Environment dynamics, observation masking, and return targets."""

import numpy as np
import pytest
from scipy import stats

from traceunits.envs import (MaskedCartpole, ThreeStateMdp, TMaze, TraceConditioning,
                             TraceConditioningConfig, compute_return_targets,
                             evaluation_horizon)


class TestTraceConditioning:
    def test_only_cs_then_us_without_distractors(self):
        cfg = TraceConditioningConfig(num_distractors=0)
        env = TraceConditioning(cfg, seed=0)
        stream = np.array([env.next() for _ in range(5000)])
        assert stream.shape[1] == 2
        cs, us = stream[:, 0], stream[:, 1]
        assert not np.any((cs > 0) & (us > 0))
        # every trial: a CS block strictly precedes its US block
        cs_starts = np.where(np.diff(np.concatenate([[0.0], cs])) > 0)[0]
        us_starts = np.where(np.diff(np.concatenate([[0.0], us])) > 0)[0]
        assert len(cs_starts) > 10
        for c0, u0 in zip(cs_starts, us_starts):
            assert c0 < u0

    def test_degenerate_isi_is_exact(self):
        cfg = TraceConditioningConfig(num_distractors=0, isi_min=7, isi_max=7)
        env = TraceConditioning(cfg, seed=3)
        stream = np.array([env.next() for _ in range(4000)])
        cs, us = stream[:, 0], stream[:, 1]
        cs_ends = np.where(np.diff(cs) < 0)[0]
        us_starts = np.where(np.diff(us) > 0)[0]
        for ce, uo in zip(cs_ends, us_starts):
            assert uo - ce == 7

    def test_isi_histogram_uniform(self):
        # chi-squared goodness of fit over observed gaps; trial count scaled
        # to keep the suite fast while leaving the test well powered
        cfg = TraceConditioningConfig(num_distractors=0, isi_min=10, isi_max=20,
                                      iti_min=2, iti_max=4, cs_duration=2,
                                      us_duration=1)
        env = TraceConditioning(cfg, seed=11)
        gaps = []
        n_trials = 20_000
        stream_len = n_trials * 25
        prev_cs = 0.0
        prev_us = 0.0
        last_cs_end = -1
        t = 0
        while len(gaps) < n_trials and t < stream_len:
            obs = env.next()
            if prev_cs > 0 and obs[0] == 0:
                last_cs_end = t
            if prev_us == 0 and obs[1] > 0 and last_cs_end >= 0:
                gaps.append(t - last_cs_end)
            prev_cs, prev_us = obs[0], obs[1]
            t += 1
        gaps = np.asarray(gaps[:n_trials])
        values, counts = np.unique(gaps, return_counts=True)
        np.testing.assert_array_equal(values, np.arange(10, 21))
        expected = len(gaps) / 11.0
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p_value = stats.chi2.sf(chi2, df=10)
        assert p_value > 0.01

    def test_distractors_flip_at_configured_rate(self):
        cfg = TraceConditioningConfig(num_distractors=5, distractor_rate=0.2)
        env = TraceConditioning(cfg, seed=5)
        stream = np.array([env.next() for _ in range(20000)])
        rate = stream[:, 2:].mean()
        assert rate == pytest.approx(0.2, abs=0.01)

    def test_deterministic_given_seed(self):
        cfg = TraceConditioningConfig()
        a = TraceConditioning(cfg, seed=9)
        b = TraceConditioning(cfg, seed=9)
        for _ in range(500):
            np.testing.assert_array_equal(a.next(), b.next())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TraceConditioningConfig(isi_min=0)
        with pytest.raises(ValueError):
            TraceConditioningConfig(discount_gamma=1.0)


class TestReturnTargets:
    def test_single_pulse(self):
        us = np.zeros(20)
        us[5] = 1.0
        targets = compute_return_targets(us, 0.9, 10)
        assert targets[0] == pytest.approx(0.6561, abs=1e-12)  # 0.9 ** 4
        assert targets[5] == pytest.approx(0.0, abs=1e-12)

    def test_all_zero(self):
        assert np.all(compute_return_targets(np.zeros(100), 0.9, 30) == 0.0)

    def test_constant_signal_geometric_limit(self):
        horizon = evaluation_horizon(0.9)
        targets = compute_return_targets(np.ones(horizon + 100), 0.9, horizon)
        assert targets[0] == pytest.approx(10.0, abs=1e-3)

    def test_horizon_tail_bound(self):
        h = evaluation_horizon(0.9)
        assert 0.9 ** h < 1e-4 <= 0.9 ** (h - 1)
        assert evaluation_horizon(0.0) == 0


class TestThreeState:
    def test_exit_from_third_state_is_previous(self):
        env = ThreeStateMdp(seed=1)
        seq = [env.current]
        for _ in range(5000):
            s, obs = env.next()
            seq.append(s)
            assert obs[s] == 1.0 and obs.sum() == 1.0
        for i in range(1, len(seq) - 1):
            if seq[i] == 2:
                assert seq[i + 1] == seq[i - 1]

    def test_uniform_exits_elsewhere(self):
        env = ThreeStateMdp(seed=2)
        counts = np.zeros(3)
        prev = env.current
        for _ in range(100_000):
            s, _ = env.next()
            if prev == 0:
                counts[s] += 1
            prev = s
        frac = counts / counts.sum()
        np.testing.assert_allclose(frac, np.ones(3) / 3, atol=0.01)

    def test_order_one_memory_predicts_third_state_exits(self):
        # remembering only the previous state suffices for perfect accuracy
        env = ThreeStateMdp(seed=3)
        prev, cur = None, env.current
        correct, total = 0, 0
        for _ in range(20_000):
            nxt, _ = env.next()
            if cur == 2 and prev is not None:
                total += 1
                correct += 1 if nxt == prev else 0
            prev, cur = cur, nxt
        assert total > 1000
        assert correct == total

    def test_starts_outside_third_state(self):
        assert ThreeStateMdp(seed=4).current == 0


class TestMaskedCartpole:
    def test_equilibrium_persists(self):
        env = MaskedCartpole("full", seed=0)
        env._state = np.zeros(4)
        alive = 0
        for a in [0, 1] * 4:  # alternating pushes around equilibrium
            step = env.step(a)
            alive += 1
            if step.done:
                break
        assert alive == 8

    def test_observation_masking(self):
        assert MaskedCartpole("full", seed=0).obs_dim == 4
        assert MaskedCartpole("positions_only", seed=0).obs_dim == 2
        assert MaskedCartpole("velocities_only", seed=0).obs_dim == 2
        env = MaskedCartpole("positions_only", seed=1)
        env.reset()
        step = env.step(0)
        full = env._state
        np.testing.assert_array_equal(step.observation, full[[0, 2]])

    def test_masked_is_subvector_of_full(self):
        env_v = MaskedCartpole("velocities_only", seed=2)
        env_v.reset()
        st = env_v.step(1)
        np.testing.assert_array_equal(st.observation, env_v._state[[1, 3]])

    def test_random_policy_baseline(self):
        rng = np.random.default_rng(0)
        env = MaskedCartpole("positions_only", seed=5)
        returns = []
        for _ in range(1000):
            env.reset()
            total, done = 0.0, False
            while not done:
                st = env.step(int(rng.integers(0, 2)))
                total += st.reward
                done = st.done
            returns.append(total)
        assert 15.0 <= float(np.mean(returns)) <= 25.0

    def test_episode_cap(self):
        env = MaskedCartpole("full", seed=6)
        env.reset()
        env._state = np.zeros(4)
        steps = 0
        done = False
        rng = np.random.default_rng(1)
        while not done and steps < 600:
            # stabilizing alternation may survive to the cap
            st = env.step(steps % 2)
            steps += 1
            done = st.done
        assert steps <= 500

    def test_invalid_action(self):
        env = MaskedCartpole("full", seed=7)
        with pytest.raises(ValueError):
            env.step(3)

    def test_deterministic_given_seed_and_actions(self):
        a = MaskedCartpole("positions_only", seed=9)
        b = MaskedCartpole("positions_only", seed=9)
        np.testing.assert_array_equal(a.reset(), b.reset())
        rng = np.random.default_rng(2)
        for _ in range(200):
            act = int(rng.integers(0, 2))
            sa, sb = a.step(act), b.step(act)
            np.testing.assert_array_equal(sa.observation, sb.observation)
            assert sa.reward == sb.reward and sa.done == sb.done
            if sa.done:
                np.testing.assert_array_equal(a.reset(), b.reset())


class TestTMaze:
    def test_oracle_return_accounting(self):
        env = TMaze(corridor_length=10, seed=0)
        obs = env.reset()
        cue = 0 if obs[0] == 1.0 else 1
        total = 0.0
        for _ in range(10):
            st = env.step(0)
            total += st.reward
            assert not st.done
        st = env.step(cue)
        total += st.reward
        assert st.done and st.info["success"]
        assert total == pytest.approx(4.0 - 0.01 * 10, abs=1e-12)

    def test_cue_hidden_after_first_step(self):
        env = TMaze(corridor_length=6, seed=1)
        obs = env.reset()
        assert obs[0] + obs[1] == 1.0 and obs[2] == 0.0
        for i in range(6):
            st = env.step(1)
            assert st.observation[0] == 0.0 and st.observation[1] == 0.0
        assert st.observation[2] == 1.0  # junction flag

    def test_memoryless_uniform_policy_halves(self):
        rng = np.random.default_rng(3)
        env = TMaze(corridor_length=3, seed=2)
        wins = 0
        episodes = 10_000
        for _ in range(episodes):
            env.reset()
            done = False
            while not done:
                st = env.step(int(rng.integers(0, 2)))
                done = st.done
            wins += 1 if st.info.get("success") else 0
        assert wins / episodes == pytest.approx(0.5, abs=0.02)

    def test_wrong_arm_penalty(self):
        env = TMaze(corridor_length=2, seed=4)
        obs = env.reset()
        cue = 0 if obs[0] == 1.0 else 1
        env.step(0)
        env.step(0)
        st = env.step(1 - cue)
        assert st.done and not st.info["success"]
        assert st.reward == pytest.approx(-0.1)
