"""PPO with a trace-trained recurrent trunk.

Rollouts advance the recurrence and its traces online; every buffer index
stores the state and traces as they stood ENTERING that step, so an episode
reset leaves exact zeros in the next index. Updates replay the single
recurrent step from the snapshot under the current parameters (the
stop-gradient forward), refresh the step's trace recursion from the stored
trace, and contract the result with the loss credit; optional flags re-run
the whole recurrence after each epoch to refresh the snapshots and/or the
value targets. The encoder below the trunk receives credit through the
current step's input path only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .build import (STREAM_INIT, STREAM_POLICY, build_environment, stream_rng)
from .config import ExperimentConfig
from .core import (RtuCell, RtuState, TraceStore, activation_apply, activation_deriv,
                   clip_raw_magnitude, init_rtu_params)
from .errors import ConfigError, NumericsError
from .nets import init_mlp, mlp_backward, mlp_forward
from .optim import AdamState, adam_step, clip_global_norm


@dataclass
class PpoConfig:
    """Update hyperparameters; defaults are the published table for control."""

    buffer_size: int = 2048
    epochs: int = 10
    minibatches: int = 32
    gae_lambda: float = 0.95
    discount: float = 0.99
    policy_clip: float = 0.2
    value_clip: float = 0.5
    grad_clip: float = 0.5
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    encoder_hidden: int = 64
    head_hidden: int = 64
    normalize_advantages: bool = True
    recompute_traces: bool = False
    recompute_targets: bool = False

    @classmethod
    def from_block(cls, block: dict) -> "PpoConfig":
        return cls(**{k: block[k] for k in cls.__dataclass_fields__})

    def __post_init__(self):
        if self.buffer_size % self.minibatches != 0:
            raise ConfigError(["ppo buffer_size must be divisible by minibatches"])
        if self.epochs < 1:
            raise ConfigError(["ppo epochs must be >= 1"])
        for name in ("policy_clip", "value_clip", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError([f"ppo {name} must be positive"])


class ActorCritic:
    """Encoder -> recurrent trunk -> two heads, trained jointly.

    The heads read the trunk's combined output; only the trunk carries
    temporal credit (through its traces), so the encoder and heads are
    ordinary feedforward layers.
    """

    def __init__(self, obs_dim: int, n_actions: int, arch: dict, ppo: PpoConfig,
                 rng: np.random.Generator):
        if arch["kind"] != "rtu":
            raise ConfigError(["the control agent uses the rtu architecture"])
        self.encoder = init_mlp(rng, [obs_dim, ppo.encoder_hidden], ["tanh"])
        params = init_rtu_params(
            rng, arch["n"], ppo.encoder_hidden,
            variant=arch["variant"], activation=arch["activation"],
            parameterization=arch["parameterization"],
            r_min=arch["r_min"], r_max=arch["r_max"], max_phase=arch["max_phase"])
        self.cell = RtuCell(params)
        width = self.cell.out_dim
        self.actor = init_mlp(rng, [width, ppo.head_hidden, n_actions],
                              ["tanh", "identity"])
        self.critic = init_mlp(rng, [width, ppo.head_hidden, 1],
                               ["tanh", "identity"])
        self.n_actions = n_actions

    def params_dict(self) -> dict[str, np.ndarray]:
        d = self.encoder.as_dict("enc.")
        d.update({f"cell.{k}": v for k, v in self.cell.params.as_dict().items()})
        d.update(self.actor.as_dict("actor."))
        d.update(self.critic.as_dict("critic."))
        return d

    def after_update(self):
        clip_raw_magnitude(self.cell.params)
        self.cell.refresh_coefficients()

    def encode(self, obs: np.ndarray):
        return mlp_forward(self.encoder, obs)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    logp = log_softmax(logits)
    p = np.exp(logp)
    a = int(rng.choice(p.shape[-1], p=p / p.sum()))
    return a, float(logp[a])


@dataclass
class RolloutBuffer:
    """One on-policy batch with per-step recurrent snapshots.

    Index t holds the observation of step t together with the recurrent
    state and traces as they stood before consuming it, the behavior-policy
    log-prob and value, and the transition outcome.
    """

    size: int
    obs_dim: int
    n: int
    enc_dim: int

    def __post_init__(self):
        B, n, d = self.size, self.n, self.enc_dim
        self.obs = np.zeros((B, self.obs_dim))
        self.actions = np.zeros(B, dtype=np.int64)
        self.rewards = np.zeros(B)
        self.dones = np.zeros(B)
        self.logp = np.zeros(B)
        self.values = np.zeros(B)
        self.h_c1 = np.zeros((B, n))
        self.h_c2 = np.zeros((B, n))
        self.e_nu_c1 = np.zeros((B, n))
        self.e_nu_c2 = np.zeros((B, n))
        self.e_th_c1 = np.zeros((B, n))
        self.e_th_c2 = np.zeros((B, n))
        self.ew11 = np.zeros((B, n, d))
        self.ew12 = np.zeros((B, n, d))
        self.ew21 = np.zeros((B, n, d))
        self.ew22 = np.zeros((B, n, d))
        # completed traces (after the step at each index), derived from the
        # snapshots in one vectorized pass; these feed gradient assembly
        self.p_nu_c1 = np.zeros((B, n))
        self.p_nu_c2 = np.zeros((B, n))
        self.p_th_c1 = np.zeros((B, n))
        self.p_th_c2 = np.zeros((B, n))
        self.pw11 = np.zeros((B, n, d))
        self.pw12 = np.zeros((B, n, d))
        self.pw21 = np.zeros((B, n, d))
        self.pw22 = np.zeros((B, n, d))
        self.advantages = np.zeros(B)
        self.value_targets = np.zeros(B)
        self.bootstrap_obs = np.zeros(self.obs_dim)
        self.last_value = 0.0

    def write_snapshot(self, t: int, state: RtuState, traces: TraceStore):
        self.h_c1[t] = state.h_c1
        self.h_c2[t] = state.h_c2
        self.e_nu_c1[t] = traces.e_nu_c1
        self.e_nu_c2[t] = traces.e_nu_c2
        self.e_th_c1[t] = traces.e_th_c1
        self.e_th_c2[t] = traces.e_th_c2
        self.ew11[t] = traces.ew11
        self.ew12[t] = traces.ew12
        self.ew21[t] = traces.ew21
        self.ew22[t] = traces.ew22


def collect_rollout(env, ac: ActorCritic, buffer: RolloutBuffer,
                    policy_rng: np.random.Generator, obs: np.ndarray,
                    episode_return: float, episode_infos: list) -> tuple[np.ndarray, float]:
    """Fill the buffer with buffer.size interaction steps. The snapshot at
    index t is taken before the step consumes obs[t]; an episode end zeroes
    the live state and traces, so the following index snapshots zeros."""
    for t in range(buffer.size):
        buffer.obs[t] = obs
        buffer.write_snapshot(t, ac.cell.state, ac.cell.traces)
        x, _ = ac.encode(obs)
        h = ac.cell.step(x)
        logits, _ = mlp_forward(ac.actor, h)
        value, _ = mlp_forward(ac.critic, h)
        action, logp = sample_action(logits, policy_rng)
        step = env.step(action)
        buffer.actions[t] = action
        buffer.logp[t] = logp
        buffer.values[t] = float(value[0])
        buffer.rewards[t] = step.reward
        buffer.dones[t] = 1.0 if step.done else 0.0
        episode_return += step.reward
        if step.done:
            episode_infos.append({"return": episode_return, **step.info})
            episode_return = 0.0
            obs = env.reset()
            ac.cell.reset()
        else:
            obs = step.observation
    buffer.bootstrap_obs = obs.copy()
    buffer.last_value = bootstrap_value(ac, obs)
    return obs, episode_return


def bootstrap_value(ac: ActorCritic, obs: np.ndarray) -> float:
    """Value of the next observation without disturbing the live recurrence."""
    snap = ac.cell.snapshot()
    x, _ = ac.encode(obs)
    h = ac.cell.step(x, update_traces=False)
    value, _ = mlp_forward(ac.critic, h)
    ac.cell.load(*snap)
    return float(value[0])


def gae_advantages(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                   last_value: float, discount: float,
                   gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward lambda-weighted TD-error recursion; targets are A + V."""
    B = rewards.shape[0]
    adv = np.zeros(B)
    next_adv = 0.0
    next_value = last_value
    for t in range(B - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + discount * not_done * next_value - values[t]
        next_adv = delta + discount * gae_lambda * not_done * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def approx_kl(logprob_old: np.ndarray, logprob_new: np.ndarray) -> float:
    """Mean of (r - 1) - log r with r the new/old likelihood ratio; a
    convexity argument makes every term non-negative."""
    logprob_old = np.asarray(logprob_old, dtype=np.float64)
    logprob_new = np.asarray(logprob_new, dtype=np.float64)
    if logprob_old.shape != logprob_new.shape:
        raise ValueError("log-prob arrays must have matching shapes")
    log_ratio = logprob_new - logprob_old
    return float(np.mean(np.expm1(log_ratio) - log_ratio))


def _replay_step(ac: ActorCritic, buffer: RolloutBuffer, idx: np.ndarray):
    """Vectorized single recurrent step from the stored snapshots under the
    current parameters: the stop-gradient forward of the update pass.

    Returns (combined output, z1, z2, encoder cache).
    """
    params = ac.cell.params
    co = ac.cell.coeffs
    x, enc_cache = ac.encode(buffer.obs[idx])
    h1, h2 = buffer.h_c1[idx], buffer.h_c2[idx]
    u1 = x @ params.w_c1.T
    u2 = x @ params.w_c2.T
    z1 = co.g * h1 - co.phi * h2 + co.gamma * u1
    z2 = co.g * h2 + co.phi * h1 + co.gamma * u2
    act = params.activation
    # both variants expose [f(z1); f(z2)]: the nonlinear state is f(z) and
    # the linear variant activates after the recurrence
    combined = np.concatenate([activation_apply(act, z1),
                               activation_apply(act, z2)], axis=-1)
    return combined, z1, z2, enc_cache


def complete_step_traces(ac: ActorCritic, buffer: RolloutBuffer, chunk: int = 512):
    """Apply one trace recursion to every snapshot, producing the traces as
    they stood after each step. Run right after collection (parameters still
    match, so this reproduces the collection-time traces exactly) and after
    any snapshot replay; minibatches consume the result as-is, which is what
    keeps the default gradients stale."""
    params = ac.cell.params
    co = ac.cell.coeffs
    act = params.activation
    nonlin = params.variant == "nonlinear"
    for lo in range(0, buffer.size, chunk):
        sl = slice(lo, min(lo + chunk, buffer.size))
        x, _ = ac.encode(buffer.obs[sl])
        h1, h2 = buffer.h_c1[sl], buffer.h_c2[sl]
        u1 = x @ params.w_c1.T
        u2 = x @ params.w_c2.T
        buffer.p_nu_c1[sl] = co.dg_nu * h1 + co.g * buffer.e_nu_c1[sl] \
            - co.dphi_nu * h2 - co.phi * buffer.e_nu_c2[sl] + co.dgamma_nu * u1
        buffer.p_nu_c2[sl] = co.dg_nu * h2 + co.g * buffer.e_nu_c2[sl] \
            + co.dphi_nu * h1 + co.phi * buffer.e_nu_c1[sl] + co.dgamma_nu * u2
        buffer.p_th_c1[sl] = co.dg_th * h1 + co.g * buffer.e_th_c1[sl] \
            - co.dphi_th * h2 - co.phi * buffer.e_th_c2[sl]
        buffer.p_th_c2[sl] = co.dg_th * h2 + co.g * buffer.e_th_c2[sl] \
            + co.dphi_th * h1 + co.phi * buffer.e_th_c1[sl]
        gn = co.g[None, :, None]
        pn = co.phi[None, :, None]
        inj = co.gamma[None, :, None] * x[:, None, :]
        buffer.pw11[sl] = gn * buffer.ew11[sl] - pn * buffer.ew21[sl] + inj
        buffer.pw21[sl] = gn * buffer.ew21[sl] + pn * buffer.ew11[sl]
        buffer.pw12[sl] = gn * buffer.ew12[sl] - pn * buffer.ew22[sl]
        buffer.pw22[sl] = gn * buffer.ew22[sl] + pn * buffer.ew12[sl] + inj
        if nonlin:
            z1 = co.g * h1 - co.phi * h2 + co.gamma * u1
            z2 = co.g * h2 + co.phi * h1 + co.gamma * u2
            fp1 = activation_deriv(act, z1)
            fp2 = activation_deriv(act, z2)
            buffer.p_nu_c1[sl] *= fp1
            buffer.p_nu_c2[sl] *= fp2
            buffer.p_th_c1[sl] *= fp1
            buffer.p_th_c2[sl] *= fp2
            buffer.pw11[sl] *= fp1[:, :, None]
            buffer.pw12[sl] *= fp1[:, :, None]
            buffer.pw21[sl] *= fp2[:, :, None]
            buffer.pw22[sl] *= fp2[:, :, None]


def _minibatch_grads(ac: ActorCritic, buffer: RolloutBuffer, idx: np.ndarray,
                     cfg: PpoConfig) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Loss gradients for one minibatch of stored steps."""
    M = idx.shape[0]
    params = ac.cell.params
    co = ac.cell.coeffs
    n = params.n
    act = params.activation

    combined, z1, z2, enc_cache = _replay_step(ac, buffer, idx)
    logits, actor_cache = mlp_forward(ac.actor, combined)
    values_new, critic_cache = mlp_forward(ac.critic, combined)
    values_new = values_new[:, 0]

    logp_all = log_softmax(logits)
    actions = buffer.actions[idx]
    rows = np.arange(M)
    logp_new = logp_all[rows, actions]
    ratio = np.exp(logp_new - buffer.logp[idx])

    adv = buffer.advantages[idx]
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.policy_clip, 1.0 + cfg.policy_clip) * adv
    policy_loss = -float(np.mean(np.minimum(unclipped, clipped)))

    returns = buffer.value_targets[idx]
    v_old = buffer.values[idx]
    v_clip = v_old + np.clip(values_new - v_old, -cfg.value_clip, cfg.value_clip)
    sq = (values_new - returns) ** 2
    sq_clip = (v_clip - returns) ** 2
    value_loss = 0.5 * float(np.mean(np.maximum(sq, sq_clip)))

    p = np.exp(logp_all)
    entropies = -np.sum(p * logp_all, axis=-1)
    entropy = float(np.mean(entropies))

    total_loss = policy_loss + cfg.vf_coef * value_loss - cfg.entropy_coef * entropy
    if not np.isfinite(total_loss):
        raise NumericsError(f"non-finite PPO loss (policy {policy_loss}, "
                            f"value {value_loss}, entropy {entropy})")

    # policy-gradient term: only where the unclipped branch is the active min
    active = (unclipped <= clipped).astype(np.float64)
    d_logp = -(adv * ratio * active) / M
    d_logits = (np.eye(ac.n_actions)[actions] - p) * d_logp[:, None]
    # entropy bonus: dH/dz = -p (log p + H)
    d_logits += cfg.entropy_coef * (p * (logp_all + entropies[:, None])) / M

    # clipped value loss
    use_plain = (sq >= sq_clip).astype(np.float64)
    inside = (np.abs(values_new - v_old) < cfg.value_clip).astype(np.float64)
    d_v = (use_plain * (values_new - returns)
           + (1.0 - use_plain) * (v_clip - returns) * inside)
    d_v *= cfg.vf_coef / M

    actor_grads, d_h_a = mlp_backward(ac.actor, actor_cache, d_logits)
    critic_grads, d_h_c = mlp_backward(ac.critic, critic_cache, d_v[:, None])
    d_h = d_h_a + d_h_c

    # credit w.r.t. the pre-activations of the replayed step
    dz1 = activation_deriv(act, z1) * d_h[:, :n]
    dz2 = activation_deriv(act, z2) * d_h[:, n:]
    if params.variant == "linear":
        d1, d2 = dz1, dz2         # traces track the pre-activation state
    else:
        d1, d2 = d_h[:, :n], d_h[:, n:]  # traces already include f'

    grads = {
        "cell.nu_log": np.einsum("bn,bn->n", d1, buffer.p_nu_c1[idx])
        + np.einsum("bn,bn->n", d2, buffer.p_nu_c2[idx]),
        "cell.theta_log": np.einsum("bn,bn->n", d1, buffer.p_th_c1[idx])
        + np.einsum("bn,bn->n", d2, buffer.p_th_c2[idx]),
        "cell.w_c1": np.einsum("bn,bnd->nd", d1, buffer.pw11[idx])
        + np.einsum("bn,bnd->nd", d2, buffer.pw21[idx]),
        "cell.w_c2": np.einsum("bn,bnd->nd", d1, buffer.pw12[idx])
        + np.einsum("bn,bnd->nd", d2, buffer.pw22[idx]),
    }
    grads.update(actor_grads.as_dict("actor."))
    grads.update(critic_grads.as_dict("critic."))

    # encoder credit through the one-step input path
    dx = (co.gamma * dz1) @ params.w_c1 + (co.gamma * dz2) @ params.w_c2
    enc_grads, _ = mlp_backward(ac.encoder, enc_cache, dx)
    grads.update(enc_grads.as_dict("enc."))

    diag = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy}
    return grads, diag


def replay_buffer_snapshots(ac: ActorCritic, buffer: RolloutBuffer):
    """Re-run the recurrence over the stored observations under the current
    parameters, overwriting the pre-step snapshots in place. The first index
    keeps its stored snapshot (the window into the pre-buffer past)."""
    live = ac.cell.snapshot()
    state = RtuState(buffer.h_c1[0].copy(), buffer.h_c2[0].copy(),
                     buffer.h_c1[0].copy(), buffer.h_c2[0].copy())
    traces = TraceStore(buffer.e_nu_c1[0].copy(), buffer.e_nu_c2[0].copy(),
                        buffer.e_th_c1[0].copy(), buffer.e_th_c2[0].copy(),
                        buffer.ew11[0].copy(), buffer.ew12[0].copy(),
                        buffer.ew21[0].copy(), buffer.ew22[0].copy())
    ac.cell.load(state, traces)
    for t in range(buffer.size):
        buffer.write_snapshot(t, ac.cell.state, ac.cell.traces)
        x, _ = ac.encode(buffer.obs[t])
        ac.cell.step(x)
        if buffer.dones[t]:
            ac.cell.reset()
    ac.cell.load(*live)


def refresh_targets(ac: ActorCritic, buffer: RolloutBuffer, cfg: PpoConfig,
                    chunk: int = 256):
    """Recompute values over the snapshots under the current parameters,
    re-bootstrap, and redo the advantage recursion."""
    B = buffer.size
    values = np.zeros(B)
    last_z = None
    for lo in range(0, B, chunk):
        idx = np.arange(lo, min(lo + chunk, B))
        combined, z1, z2, _ = _replay_step(ac, buffer, idx)
        v, _ = mlp_forward(ac.critic, combined)
        values[idx] = v[:, 0]
        last_z = (z1[-1], z2[-1])
    buffer.values = values
    if buffer.dones[-1]:
        buffer.last_value = 0.0
    else:
        saved = ac.cell.snapshot()
        act = ac.cell.params.activation
        z1, z2 = last_z
        if ac.cell.params.variant == "nonlinear":
            h1, h2 = activation_apply(act, z1), activation_apply(act, z2)
        else:
            h1, h2 = z1, z2
        ac.cell.state = RtuState(h1.copy(), h2.copy(), z1.copy(), z2.copy())
        buffer.last_value = bootstrap_value(ac, buffer.bootstrap_obs)
        ac.cell.load(*saved)
    buffer.advantages, buffer.value_targets = gae_advantages(
        buffer.rewards, buffer.values, buffer.dones, buffer.last_value,
        cfg.discount, cfg.gae_lambda)


def ppo_epoch_update(ac: ActorCritic, buffer: RolloutBuffer, cfg: PpoConfig,
                     opt: AdamState, shuffle_rng: np.random.Generator) -> dict[str, float]:
    """The full multi-epoch clipped-surrogate update for one buffer."""
    complete_step_traces(ac, buffer)
    buffer.advantages, buffer.value_targets = gae_advantages(
        buffer.rewards, buffer.values, buffer.dones, buffer.last_value,
        cfg.discount, cfg.gae_lambda)
    mb_size = cfg.buffer_size // cfg.minibatches
    diag_sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    n_batches = 0
    for _epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(buffer.size)
        for b in range(cfg.minibatches):
            idx = perm[b * mb_size:(b + 1) * mb_size]
            grads, diag = _minibatch_grads(ac, buffer, idx, cfg)
            grads = clip_global_norm(grads, cfg.grad_clip)
            adam_step(opt, ac.params_dict(), grads, inplace=True)
            ac.after_update()
            for k in diag_sums:
                diag_sums[k] += diag[k]
            n_batches += 1
        if cfg.recompute_traces:
            replay_buffer_snapshots(ac, buffer)
            complete_step_traces(ac, buffer)
        if cfg.recompute_targets:
            refresh_targets(ac, buffer, cfg)

    logp_new = np.zeros(buffer.size)
    for lo in range(0, buffer.size, 256):
        idx = np.arange(lo, min(lo + 256, buffer.size))
        combined, _, _, _ = _replay_step(ac, buffer, idx)
        logits, _ = mlp_forward(ac.actor, combined)
        logp_all = log_softmax(logits)
        logp_new[idx] = logp_all[np.arange(idx.size), buffer.actions[idx]]
    out = {k: v / max(n_batches, 1) for k, v in diag_sums.items()}
    out["approx_kl"] = approx_kl(buffer.logp, logp_new)
    return out


@dataclass
class PpoMetrics:
    updates: int
    steps: int
    update_steps: np.ndarray
    mean_returns: np.ndarray
    policy_losses: np.ndarray
    value_losses: np.ndarray
    entropies: np.ndarray
    approx_kls: np.ndarray
    wall_times: np.ndarray
    episode_returns: np.ndarray
    success_rate: np.ndarray  # per update; NaN where the env has no notion


def run_ppo(cfg: ExperimentConfig, seed: int, csv_path=None,
            early_stop=None) -> PpoMetrics:
    """Train until cfg.steps interaction steps, or earlier if ``early_stop``
    (called with each finished update's row dict) returns True."""
    env = build_environment(cfg.environment, seed)
    if not hasattr(env, "n_actions"):
        raise ConfigError([f"environment {cfg.environment['kind']} is not a control task"])
    ppo_cfg = PpoConfig.from_block(cfg.ppo)
    init_rng = stream_rng(seed, STREAM_INIT)
    policy_rng = stream_rng(seed, STREAM_POLICY)
    shuffle_rng = stream_rng(seed, STREAM_POLICY + 64)
    ac = ActorCritic(env.obs_dim, env.n_actions, cfg.architecture, ppo_cfg, init_rng)
    opt = AdamState(lr=cfg.optimizer["lr"], beta1=cfg.optimizer["beta1"],
                    beta2=cfg.optimizer["beta2"], eps=cfg.optimizer["eps"])
    buffer = RolloutBuffer(ppo_cfg.buffer_size, env.obs_dim,
                           cfg.architecture["n"], ppo_cfg.encoder_hidden)

    n_updates = max(1, cfg.steps // ppo_cfg.buffer_size)
    obs = env.reset()
    episode_return = 0.0
    episode_infos: list[dict] = []
    all_returns: list[float] = []
    successes: list[float] = []
    rows = []
    last_mean_return = float("nan")
    for update in range(n_updates):
        t0 = time.perf_counter()
        obs, episode_return = collect_rollout(env, ac, buffer, policy_rng, obs,
                                              episode_return, episode_infos)
        diag = ppo_epoch_update(ac, buffer, ppo_cfg, opt, shuffle_rng)
        wall = time.perf_counter() - t0
        new_infos, episode_infos = episode_infos, []
        for info in new_infos:
            all_returns.append(info["return"])
            if "success" in info:
                successes.append(1.0 if info["success"] else 0.0)
        if new_infos:
            last_mean_return = float(np.mean([i["return"] for i in new_infos]))
        success_rate = (float(np.mean(successes[-100:]))
                        if successes else float("nan"))
        rows.append({
            "update": update,
            "step": (update + 1) * ppo_cfg.buffer_size,
            "mean_return": last_mean_return,
            "policy_loss": diag["policy_loss"],
            "value_loss": diag["value_loss"],
            "entropy": diag["entropy"],
            "approx_kl": diag["approx_kl"],
            "success_rate": success_rate,
            "wall_time": wall,
        })
        if early_stop is not None and early_stop(rows[-1]):
            break

    metrics = PpoMetrics(
        updates=len(rows),
        steps=len(rows) * ppo_cfg.buffer_size,
        update_steps=np.array([r["step"] for r in rows], dtype=np.int64),
        mean_returns=np.array([r["mean_return"] for r in rows]),
        policy_losses=np.array([r["policy_loss"] for r in rows]),
        value_losses=np.array([r["value_loss"] for r in rows]),
        entropies=np.array([r["entropy"] for r in rows]),
        approx_kls=np.array([r["approx_kl"] for r in rows]),
        wall_times=np.array([r["wall_time"] for r in rows]),
        episode_returns=np.array(all_returns),
        success_rate=np.array([r["success_rate"] for r in rows]),
    )
    if csv_path is not None:
        write_ppo_csv(csv_path, rows)
    return metrics


def write_ppo_csv(path, rows):
    """Columns: update, step, mean_episodic_return, policy_loss, value_loss,
    entropy, approx_kl, success_rate, wall_time."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["update", "step", "mean_episodic_return", "policy_loss",
                         "value_loss", "entropy", "approx_kl", "success_rate",
                         "wall_time"])
        for r in rows:
            writer.writerow([r["update"], r["step"], repr(r["mean_return"]),
                             repr(r["policy_loss"]), repr(r["value_loss"]),
                             repr(r["entropy"]), repr(r["approx_kl"]),
                             repr(r["success_rate"]), repr(r["wall_time"])])
