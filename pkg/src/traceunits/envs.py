"""Built-in partially observable environments.

Two continuing prediction streams (trace conditioning, three-state MDP) and
two episodic control tasks (cart-pole with masked observations, T-maze).
Every environment owns its generator, so (seed, action sequence) fixes the
whole trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Trace conditioning
# ---------------------------------------------------------------------------

@dataclass
class TraceConditioningConfig:
    """One trial: the trigger channel fires, a random gap follows, then the
    target channel fires; distractor channels flip on independently. The gap
    makes the prediction a memory problem."""

    isi_min: int = 10
    isi_max: int = 20
    cs_duration: int = 4
    us_duration: int = 2
    num_distractors: int = 10
    distractor_rate: float = 0.05
    iti_min: int = 40
    iti_max: int = 60
    discount_gamma: float = 0.9

    def __post_init__(self):
        if not (0 < self.isi_min <= self.isi_max):
            raise ValueError("need 0 < isi_min <= isi_max")
        if self.cs_duration < 1 or self.us_duration < 1:
            raise ValueError("durations must be >= 1")
        if not (0.0 <= self.distractor_rate <= 1.0):
            raise ValueError("distractor_rate must be a probability")
        if not (0.0 <= self.discount_gamma < 1.0):
            raise ValueError("discount_gamma must lie in [0, 1)")
        if self.num_distractors < 0 or self.iti_min < 0 or self.iti_min > self.iti_max:
            raise ValueError("bad distractor count or inter-trial interval")

    @property
    def obs_dim(self) -> int:
        return 2 + self.num_distractors


class TraceConditioning:
    """Continuing stream; channel 0 is the trigger (CS), channel 1 the
    predicted signal (US). No episode boundaries."""

    CS, US = 0, 1

    def __init__(self, config: TraceConditioningConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(np.random.Philox(key=seed))
        self._phase = "iti"
        self._remaining = 1  # first trial starts immediately
        self._last_isi = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def _advance_phase(self):
        cfg = self.config
        if self._phase == "iti":
            self._phase = "cs"
            self._remaining = cfg.cs_duration
        elif self._phase == "cs":
            self._phase = "isi"
            self._last_isi = int(self.rng.integers(cfg.isi_min, cfg.isi_max + 1))
            self._remaining = self._last_isi
        elif self._phase == "isi":
            self._phase = "us"
            self._remaining = cfg.us_duration
        else:  # us
            self._phase = "iti"
            self._remaining = int(self.rng.integers(cfg.iti_min, cfg.iti_max + 1))

    def next(self) -> np.ndarray:
        """Emit the next observation of the stream."""
        cfg = self.config
        while self._remaining == 0:
            self._advance_phase()
        self._remaining -= 1
        obs = np.zeros(cfg.obs_dim)
        if self._phase == "cs":
            obs[self.CS] = 1.0
        elif self._phase == "us":
            obs[self.US] = 1.0
        if cfg.num_distractors > 0:
            obs[2:] = (self.rng.random(cfg.num_distractors) < cfg.distractor_rate)
        return obs


def compute_return_targets(us_stream: np.ndarray, discount_gamma: float,
                           horizon: int) -> np.ndarray:
    """Discounted lookahead sums G_t = sum_{k=0..horizon} gamma^k us[t+1+k].

    Only entries whose full horizon fits inside the stream are returned, so
    the result has length len(us_stream) - 1 - horizon.
    """
    us = np.asarray(us_stream, dtype=np.float64)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if us.shape[0] < horizon + 2:
        return np.zeros(0)
    kernel = discount_gamma ** np.arange(horizon + 1)
    return np.correlate(us[1:], kernel, mode="valid")[: us.shape[0] - 1 - horizon]


def evaluation_horizon(discount_gamma: float, tail_tol: float = 1e-4) -> int:
    """Smallest H with gamma^H below the tail tolerance (H = 0 for gamma = 0)."""
    if discount_gamma <= 0.0:
        return 0
    return int(np.ceil(np.log(tail_tol) / np.log(discount_gamma)))


# ---------------------------------------------------------------------------
# Three-state MDP
# ---------------------------------------------------------------------------

class ThreeStateMdp:
    """No actions. From the first two states the next state is uniform over
    all three; from the third it is whatever state immediately preceded the
    third. Perfect prediction out of the third state needs one step of
    memory. Starts in the first state (the third has no predecessor yet).
    """

    N_STATES = 3

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(np.random.Philox(key=seed))
        self.current = 0
        self.previous = 0

    @property
    def obs_dim(self) -> int:
        return 3

    def observe(self) -> np.ndarray:
        obs = np.zeros(3)
        obs[self.current] = 1.0
        return obs

    def next(self) -> tuple[int, np.ndarray]:
        """Advance one transition; returns the new state index and its
        one-hot observation."""
        if self.current == 2:
            nxt = self.previous
        else:
            nxt = int(self.rng.integers(0, 3))
        self.previous = self.current
        self.current = nxt
        return nxt, self.observe()


# ---------------------------------------------------------------------------
# Cart-pole with masked observations
# ---------------------------------------------------------------------------

MASK_MODES = ("full", "positions_only", "velocities_only")


class MaskedCartpole:
    """Euler-integrated pole balancing with two discrete pushes. The mask
    hides part of the state: positions_only drops both velocities (the agent
    must integrate), velocities_only drops both positions."""

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    LENGTH = 0.5  # half pole length
    FORCE_MAG = 10.0
    DT = 0.02
    THETA_LIMIT = 12.0 * 2.0 * np.pi / 360.0
    X_LIMIT = 2.4
    MAX_STEPS = 500

    def __init__(self, mask: str = "positions_only", seed: int = 0):
        if mask not in MASK_MODES:
            raise ValueError(f"mask must be one of {MASK_MODES}, got {mask!r}")
        self.mask = mask
        self.rng = np.random.default_rng(np.random.Philox(key=seed))
        self._total_mass = self.MASS_CART + self.MASS_POLE
        self._pole_ml = self.MASS_POLE * self.LENGTH
        self.reset()

    @property
    def obs_dim(self) -> int:
        return 4 if self.mask == "full" else 2

    @property
    def n_actions(self) -> int:
        return 2

    def _observe(self) -> np.ndarray:
        x, x_dot, theta, theta_dot = self._state
        if self.mask == "full":
            return np.array([x, x_dot, theta, theta_dot])
        if self.mask == "positions_only":
            return np.array([x, theta])
        return np.array([x_dot, theta_dot])

    def reset(self) -> np.ndarray:
        self._state = self.rng.uniform(-0.05, 0.05, size=4)
        self._steps = 0
        return self._observe()

    def step(self, action: int) -> EnvStep:
        if action not in (0, 1):
            raise ValueError(f"invalid action {action!r}; expected 0 (left) or 1 (right)")
        x, x_dot, theta, theta_dot = self._state
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        cos_t = np.cos(theta)
        sin_t = np.sin(theta)
        tmp = (force + self._pole_ml * theta_dot ** 2 * sin_t) / self._total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * tmp) / (
            self.LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t ** 2 / self._total_mass))
        x_acc = tmp - self._pole_ml * theta_acc * cos_t / self._total_mass
        x += self.DT * x_dot
        x_dot += self.DT * x_acc
        theta += self.DT * theta_dot
        theta_dot += self.DT * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1
        failed = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        truncated = self._steps >= self.MAX_STEPS
        done = failed or truncated
        return EnvStep(self._observe(), 1.0, done,
                       {"truncated": truncated and not failed})


# ---------------------------------------------------------------------------
# T-maze
# ---------------------------------------------------------------------------

class TMaze:
    """A cue at the first step names the rewarded arm; the corridor hides it.

    Observations are [cue_left, cue_right, at_junction]. Any action advances
    along the corridor (cost 0.01 per corridor step); at the junction action
    0 turns left and 1 turns right, ending the episode with +4 for the cued
    arm and -0.1 otherwise.
    """

    REWARD_CORRECT = 4.0
    REWARD_WRONG = -0.1
    STEP_COST = -0.01

    def __init__(self, corridor_length: int = 10, seed: int = 0):
        if corridor_length < 1:
            raise ValueError("corridor_length must be >= 1")
        self.corridor_length = corridor_length
        self.rng = np.random.default_rng(np.random.Philox(key=seed))
        self.reset()

    @property
    def obs_dim(self) -> int:
        return 3

    @property
    def n_actions(self) -> int:
        return 2

    def _observe(self) -> np.ndarray:
        obs = np.zeros(3)
        if self._position == 0:
            obs[0 if self._goal == 0 else 1] = 1.0
        elif self._position >= self.corridor_length:
            obs[2] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self._goal = int(self.rng.integers(0, 2))
        self._position = 0
        return self._observe()

    def step(self, action: int) -> EnvStep:
        if action not in (0, 1):
            raise ValueError(f"invalid action {action!r}; expected 0 (left) or 1 (right)")
        if self._position < self.corridor_length:
            self._position += 1
            return EnvStep(self._observe(), self.STEP_COST, False, {})
        success = action == self._goal
        reward = self.REWARD_CORRECT if success else self.REWARD_WRONG
        return EnvStep(np.zeros(3), reward, True, {"success": success})
