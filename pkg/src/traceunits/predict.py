"""Online return prediction on the trace-conditioning stream.

One recurrent layer plus a linear prediction head, trained strictly online
with one-step semi-gradient TD (Monte-Carlo regression on the delayed
lookahead return is available behind ``target_mode = mc``). Quality is
measured offline as the mean squared error against the truncated lookahead
return, which is never used as a training signal in TD mode.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .baselines import BlockDiagCell, LruCell
from .build import STREAM_INIT, build_cell, build_environment, stream_rng
from .config import ExperimentConfig
from .core import RtuCell, clip_raw_magnitude, derive_coefficients
from .envs import TraceConditioning, compute_return_targets, evaluation_horizon
from .errors import ConfigError, DivergenceError, NumericsError
from .nets import init_mlp, mlp_backward, mlp_forward
from .optim import AdamState, adam_step, clip_global_norm
from .oracles import RtuWindowScratch, UnrollRecord, rtu_window_gradient, rtu_window_output

DIVERGENCE_MSRE = 1e6


@dataclass
class PredictionMetrics:
    steps: int
    window: int
    window_steps: np.ndarray
    windowed_msre: np.ndarray
    cumulative_msre: np.ndarray
    msre_mean: float
    final_windowed_msre: float
    min_windowed_msre: float
    best_constant_msre: float
    predictions: np.ndarray
    targets: np.ndarray


def best_constant_msre(targets: np.ndarray) -> float:
    """MSRE of the best constant predictor: the variance of the targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        return 0.0
    return float(np.var(targets))


class RtrlTdAgent:
    """Recurrent cell plus linear head, updated every step from the traces.

    The gradient for the transition out of step t uses the step-t snapshot of
    (state, traces) and the step-t head cache; the recurrence itself has
    already moved on to t+1 when the update fires.
    """

    def __init__(self, cell, rng: np.random.Generator, opt: AdamState,
                 grad_clip: float = 0.0, target_mode: str = "td",
                 mc_horizon: int = 0):
        self.cell = cell
        self.is_lru = isinstance(cell, LruCell)
        self.readout = None if self.is_lru else init_mlp(rng, [cell.out_dim, 1], ["identity"])
        self.opt = opt
        self.grad_clip = grad_clip
        self.target_mode = target_mode
        self.mc_horizon = mc_horizon
        self._pending = deque()
        self._us_hist: list[float] = []
        self._t = 0

    # -- value path ---------------------------------------------------------

    def _value(self):
        if self.is_lru:
            out = (self.cell.params.w_out_re @ self.cell.state.h_re
                   - self.cell.params.w_out_im @ self.cell.state.h_im)
            return float(out[0]), None, out
        out = self.cell.output()
        v, cache = mlp_forward(self.readout, out)
        return float(v[0]), cache, out

    def _params_dict(self):
        d = {f"cell.{k}": v for k, v in self.cell.params.as_dict().items()}
        if self.readout is not None:
            d.update(self.readout.as_dict("ro."))
        return d

    def _grads(self, snapshot, cache, d_value: float):
        if self.is_lru:
            grads = self.cell.grads_at(snapshot, np.array([d_value]))
            return {f"cell.{k}": v for k, v in grads.items()}
        ro_grads, d_h = mlp_backward(self.readout, cache, np.array([d_value]))
        grads = {f"cell.{k}": v
                 for k, v in self.cell.grads_at(snapshot, d_h).items()}
        grads.update(ro_grads.as_dict("ro."))
        return grads

    def _apply(self, grads):
        if self.grad_clip > 0.0:
            grads = clip_global_norm(grads, self.grad_clip)
        _, self.opt = adam_step(self.opt, self._params_dict(), grads, inplace=True)
        if isinstance(self.cell, RtuCell):
            clip_raw_magnitude(self.cell.params)
        self.cell.refresh_coefficients()

    # -- protocol -----------------------------------------------------------

    def begin(self, x: np.ndarray) -> float:
        self.cell.step(x)
        self._v, self._cache, _ = self._value()
        self._snap = self.cell.snapshot()
        self._t = 0
        return self._v

    def transition(self, x_next: np.ndarray, us_next: float,
                   gamma: float) -> float:
        self.cell.step(x_next)
        v_next, cache_next, _ = self._value()
        if self.target_mode == "td":
            delta = us_next + gamma * v_next - self._v
            self._apply(self._grads(self._snap, self._cache, -delta))
        else:
            self._us_hist.append(us_next)
            self._pending.append((self._t, self._snap, self._cache, self._v))
            head_time, snap, cache, v_old = self._pending[0]
            # target for head_time needs us at head_time+1 .. head_time+H+1;
            # us index k in _us_hist is the signal at stream time k+1
            if len(self._us_hist) >= head_time + self.mc_horizon + 1:
                self._pending.popleft()
                us = self._us_hist[head_time: head_time + self.mc_horizon + 1]
                g = 0.0
                scale = 1.0
                for u in us:
                    g += scale * u
                    scale *= gamma
                self._apply(self._grads(snap, cache, v_old - g))
        self._t += 1
        # fresh prediction for the step we just entered
        self._v, self._cache, _ = self._value()
        self._snap = self.cell.snapshot()
        return self._v


class TbpttTdAgent:
    """Truncated-window agent: predictions and gradients both come from
    replaying the last T inputs under the current parameters, starting at a
    live anchor state that trails the window."""

    def __init__(self, cell: RtuCell, rng: np.random.Generator, opt: AdamState,
                 truncation: int, grad_clip: float = 0.0):
        if not isinstance(cell, RtuCell):
            raise ConfigError(["tbptt learning is implemented for the rtu architecture only"])
        self.cell = cell  # parameter container; live state goes unused
        self.params = cell.params
        self.coeffs = cell.coeffs
        self.readout = init_mlp(rng, [cell.out_dim, 1], ["identity"])
        self.opt = opt
        self.grad_clip = grad_clip
        self.truncation = truncation
        self.record = UnrollRecord(truncation, self.params.n, self.params.d)
        self._scratch_now = RtuWindowScratch(truncation, self.params.n)
        self._scratch_prev = RtuWindowScratch(truncation, self.params.n)

    def _params_dict(self):
        d = {f"cell.{k}": v for k, v in self.params.as_dict().items()}
        d.update(self.readout.as_dict("ro."))
        return d

    def _forward_window(self):
        xs = np.asarray(self.record.xs)
        out = rtu_window_output(xs, self.record.anchor_c1, self.record.anchor_c2,
                                self.params, self.coeffs, self._scratch_now)
        v, cache = mlp_forward(self.readout, out)
        return xs, out, float(v[0]), cache

    def begin(self, x: np.ndarray) -> float:
        self.record.push(x, self.params, self.coeffs)
        self._xs, self._out, self._v, self._cache = self._forward_window()
        self._scratch_now, self._scratch_prev = self._scratch_prev, self._scratch_now
        return self._v

    def transition(self, x_next: np.ndarray, us_next: float,
                   gamma: float) -> float:
        self.record.push(x_next, self.params, self.coeffs)
        xs_next, out_next, v_next, cache_next = self._forward_window()
        delta = us_next + gamma * v_next - self._v
        ro_grads, d_h = mlp_backward(self.readout, self._cache, np.array([-delta]))
        rec_grad = rtu_window_gradient(self._xs, self.params, self.coeffs,
                                       self._scratch_prev, d_h)
        grads = {f"cell.{k}": v for k, v in rec_grad.as_dict().items()}
        grads.update(ro_grads.as_dict("ro."))
        if self.grad_clip > 0.0:
            grads = clip_global_norm(grads, self.grad_clip)
        _, self.opt = adam_step(self.opt, self._params_dict(), grads, inplace=True)
        clip_raw_magnitude(self.params)
        self.coeffs = derive_coefficients(self.params)
        # fresh replay for the step we just entered, under the new parameters
        self._xs, self._out, self._v, self._cache = self._forward_window()
        self._scratch_now, self._scratch_prev = self._scratch_prev, self._scratch_now
        return self._v


def build_prediction_agent(cfg: ExperimentConfig, seed: int):
    arch = cfg.architecture
    env_block = cfg.environment
    rng = stream_rng(seed, STREAM_INIT)
    in_dim = 2 + env_block["num_distractors"]
    gamma = env_block["discount_gamma"]
    opt = AdamState(lr=cfg.optimizer["lr"], beta1=cfg.optimizer["beta1"],
                    beta2=cfg.optimizer["beta2"], eps=cfg.optimizer["eps"])
    grad_clip = cfg.optimizer["grad_clip"]
    if arch["learning_mode"] == "tbptt":
        if arch["kind"] != "rtu":
            raise ConfigError(["tbptt learning is implemented for the rtu architecture only"])
        cell = build_cell(arch, in_dim, rng)
        return TbpttTdAgent(cell, rng, opt, truncation=arch["truncation"],
                            grad_clip=grad_clip)
    cell = build_cell(arch, in_dim, rng, lru_out_dim=1)
    if arch["target_mode"] == "mc" and arch["kind"] == "lru":
        raise ConfigError(["mc target mode is implemented for rtu and blockdiag only"])
    return RtrlTdAgent(cell, rng, opt, grad_clip=grad_clip,
                       target_mode=arch["target_mode"],
                       mc_horizon=evaluation_horizon(gamma))


def run_online_prediction(cfg: ExperimentConfig, seed: int,
                          csv_path=None) -> PredictionMetrics:
    """One seed of the online prediction experiment.

    Aborts with DivergenceError if the windowed MSRE crosses the guard or the
    numerics blow up; the partial diagnostics ride on the exception.
    """
    if cfg.environment["kind"] != "trace_conditioning":
        raise ConfigError(["prediction runs use the trace_conditioning environment"])
    env = build_environment(cfg.environment, seed)
    assert isinstance(env, TraceConditioning)
    agent = build_prediction_agent(cfg, seed)
    gamma = cfg.environment["discount_gamma"]
    horizon = evaluation_horizon(gamma)
    n_steps = cfg.steps
    window = cfg.window

    us = np.zeros(n_steps)
    preds = np.zeros(n_steps)
    sq_sum = 0.0
    sq_count = 0
    covered = 0
    window_steps: list[int] = []
    windowed: list[float] = []
    cumulative: list[float] = []

    def advance_coverage(t_done: int):
        nonlocal covered, sq_sum, sq_count
        new_cov = max(0, t_done - horizon)
        if new_cov <= covered:
            return None
        chunk = us[covered + 1: new_cov + horizon + 1]
        kernel = gamma ** np.arange(horizon + 1)
        targets = np.correlate(chunk, kernel, mode="valid")
        sq = (preds[covered:new_cov] - targets) ** 2
        sq_sum += float(np.sum(sq))
        sq_count += sq.size
        covered = new_cov
        return float(np.mean(sq))

    x = env.next()
    us[0] = x[TraceConditioning.US]
    preds[0] = agent.begin(x)
    try:
        for t in range(1, n_steps):
            x = env.next()
            us[t] = x[TraceConditioning.US]
            preds[t] = agent.transition(x, us[t], gamma)
            if t % window == 0:
                w = advance_coverage(t)
                if w is not None:
                    window_steps.append(t)
                    windowed.append(w)
                    cumulative.append(sq_sum / max(sq_count, 1))
                    if w > DIVERGENCE_MSRE:
                        raise DivergenceError(
                            f"windowed MSRE {w:.3e} crossed {DIVERGENCE_MSRE:.0e} "
                            f"at step {t} (seed {seed})")
    except NumericsError as exc:
        raise DivergenceError(f"numerics failure at seed {seed}: {exc}") from exc

    w = advance_coverage(n_steps - 1)
    if w is not None:
        window_steps.append(n_steps - 1)
        windowed.append(w)
        cumulative.append(sq_sum / max(sq_count, 1))

    targets_all = compute_return_targets(us, gamma, horizon)
    metrics = PredictionMetrics(
        steps=n_steps,
        window=window,
        window_steps=np.asarray(window_steps, dtype=np.int64),
        windowed_msre=np.asarray(windowed),
        cumulative_msre=np.asarray(cumulative),
        msre_mean=sq_sum / max(sq_count, 1),
        final_windowed_msre=windowed[-1] if windowed else float("nan"),
        min_windowed_msre=min(windowed) if windowed else float("nan"),
        best_constant_msre=best_constant_msre(targets_all),
        predictions=preds,
        targets=targets_all,
    )
    if csv_path is not None:
        write_prediction_csv(csv_path, metrics, cfg.log_every)
    return metrics


def write_prediction_csv(path, metrics: PredictionMetrics, log_every: int):
    """Columns: step, windowed_msre, cumulative_msre, prediction, target."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "windowed_msre", "cumulative_msre",
                         "prediction", "target"])
        boundary = 0
        for step in range(0, metrics.steps, log_every):
            while (boundary < len(metrics.window_steps)
                   and metrics.window_steps[boundary] <= step):
                boundary += 1
            if boundary == 0:
                w_val, c_val = float("nan"), float("nan")
            else:
                w_val = metrics.windowed_msre[boundary - 1]
                c_val = metrics.cumulative_msre[boundary - 1]
            target = (metrics.targets[step]
                      if step < metrics.targets.shape[0] else float("nan"))
            writer.writerow([step, repr(w_val), repr(c_val),
                             repr(float(metrics.predictions[step])), repr(float(target))])
