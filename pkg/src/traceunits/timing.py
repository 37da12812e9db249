"""Per-update wall-time measurements.

The timed paths are the exact agent methods the training loops call: the
forward-mode agent's transition (cost independent of any window length) and
the truncated-window agent's transition (cost grows with the window). Batch
mode amortizes non-overlapping windows over their samples. A separate helper
compares the compiled and reference kernel backends on the same arithmetic.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .config import parse_config
from .predict import RtrlTdAgent, TbpttTdAgent, build_prediction_agent
from .core import derive_coefficients, init_rtu_params
from .optim import AdamState, adam_step
from .oracles import (RtuWindowScratch, UnrollRecord, rtu_window_gradient,
                      rtu_window_output)

DEFAULT_T_GRID = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class TimingRecord:
    method: str
    n: int
    d: int
    T: int
    repetitions: int
    median_us: float
    iqr_us: float
    flagged: bool  # set when the per-update time is too close to clock resolution


def _resolution_s() -> float:
    return time.get_clock_info("perf_counter").resolution


def _measure(fn, repetitions: int, inner: int, warmup: int = 3) -> tuple[float, float, bool]:
    """Median and IQR of per-call time over ``repetitions`` blocks of
    ``inner`` calls each; warmup blocks discarded."""
    for _ in range(warmup):
        fn()
    samples = np.zeros(repetitions)
    for r in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples[r] = (time.perf_counter() - t0) / inner
    median = float(np.median(samples))
    iqr = float(np.percentile(samples, 75) - np.percentile(samples, 25))
    flagged = median < 10.0 * _resolution_s()
    return median * 1e6, iqr * 1e6, flagged


def _predict_config_text(n: int, learning_mode: str, truncation: int) -> str:
    return f"""
[experiment]
kind = predict
[architecture]
kind = rtu
variant = linear
n = {n}
learning_mode = {learning_mode}
truncation = {truncation}
[environment]
kind = trace_conditioning
[optimizer]
lr = 0.001
"""


def _agent_stepper(agent, d: int, rng: np.random.Generator):
    """Drive one training transition per call on a synthetic input stream."""
    agent.begin(rng.normal(size=d))

    def step():
        x = rng.normal(size=d)
        agent.transition(x, float(x[0] > 0.5), 0.9)
    return step


def measure_update_time(n: int = 32, t_grid=DEFAULT_T_GRID,
                        repetitions: int = 30, inner: int = 40,
                        batch_size: int = 256, seed: int = 0) -> list[TimingRecord]:
    """Per-update times for the forward-mode agent and the truncated-window
    agent at matched parameter counts, plus the amortized per-sample cost of
    non-overlapping batch windows."""
    records = []
    d = 12
    rng = np.random.default_rng(np.random.Philox(key=seed))

    cfg = parse_config(_predict_config_text(n, "rtrl", 1))
    for T in t_grid:
        agent = build_prediction_agent(cfg, seed=seed)
        assert isinstance(agent, RtrlTdAgent)
        med, iqr, flag = _measure(_agent_stepper(agent, d, rng), repetitions, inner)
        records.append(TimingRecord("rtrl", n, d, T, repetitions, med, iqr, flag))

    for T in t_grid:
        cfg_t = parse_config(_predict_config_text(n, "tbptt", T))
        agent = build_prediction_agent(cfg_t, seed=seed)
        assert isinstance(agent, TbpttTdAgent)
        med, iqr, flag = _measure(_agent_stepper(agent, d, rng), repetitions, inner)
        records.append(TimingRecord("tbptt_incremental", n, d, T, repetitions, med, iqr, flag))

    for T in t_grid:
        med, iqr, flag = _measure(_batch_window_pass(n, d, T, batch_size, seed),
                                  repetitions, max(1, inner // 8))
        records.append(TimingRecord("tbptt_batch_per_sample", n, d, T,
                                    repetitions, med / batch_size, iqr / batch_size, flag))
    return records


def _batch_window_pass(n: int, d: int, T: int, batch_size: int, seed: int):
    """One call = one full-buffer update by non-overlapping windows of length
    T: each window replays forward and backpropagates a final-step loss, so
    the per-sample cost stays roughly flat in T."""
    rng = np.random.default_rng(np.random.Philox(key=seed + 1))
    params = init_rtu_params(rng, n, d, variant="linear", activation="identity",
                             r_max=0.95)
    xs = rng.normal(size=(batch_size, d))
    anchors = rng.normal(size=(batch_size // T + 1, 2, n)) * 0.1
    readout = rng.normal(size=2 * n) / np.sqrt(2 * n)
    opt = AdamState(lr=1e-4)
    scratch = RtuWindowScratch(T, n)

    def run():
        coeffs = derive_coefficients(params)
        grads = None
        for w in range(batch_size // T):
            window = xs[w * T:(w + 1) * T]
            out = rtu_window_output(window, anchors[w, 0], anchors[w, 1],
                                    params, coeffs, scratch)
            d_out = readout * (readout @ out)
            g = rtu_window_gradient(window, params, coeffs, scratch, d_out)
            if grads is None:
                grads = g.as_dict()
            else:
                for k, v in g.as_dict().items():
                    grads[k] += v
        adam_step(opt, params.as_dict(), grads, inplace=True)
    return run


def compare_backends(n_grid=(8, 32, 128), d: int = 16, steps: int = 2000,
                     repetitions: int = 15) -> list[dict]:
    """Per-step fused update time for each available kernel backend on the
    same arithmetic; returns one row per (backend, n)."""
    from .kernels import pyref

    backends = [("python", pyref)]
    try:
        from .kernels import _speedups
        backends.insert(0, ("compiled", _speedups))
    except ImportError:
        pass

    rng = np.random.default_rng(np.random.Philox(key=7))
    rows = []
    for name, impl in backends:
        for n in n_grid:
            params = init_rtu_params(rng, n, d, variant="nonlinear",
                                     activation="relu", r_max=0.95)
            co = derive_coefficients(params)
            h1, h2 = np.zeros(n), np.zeros(n)
            p1, p2 = np.zeros(n), np.zeros(n)
            tr = [np.zeros(n) for _ in range(4)] + [np.zeros((n, d)) for _ in range(4)]
            x = rng.normal(size=d)

            def one_step():
                impl.rtu_fused_step(True, 1, co.g, co.phi, co.gamma,
                                    co.dg_nu, co.dphi_nu, co.dg_th, co.dphi_th,
                                    co.dgamma_nu, params.w_c1, params.w_c2, x,
                                    h1, h2, p1, p2, *tr, True)
            med, iqr, flag = _measure(one_step, repetitions, steps)
            rows.append({"backend": name, "n": n, "d": d,
                         "median_us": med, "iqr_us": iqr, "flagged": flag})
    return rows


def write_timing_csv(path, records: list[TimingRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "n", "d", "T", "repetitions",
                         "median_us", "iqr_us", "flagged"])
        for r in records:
            writer.writerow([r.method, r.n, r.d, r.T, r.repetitions,
                             repr(r.median_us), repr(r.iqr_us), int(r.flagged)])


def regression_slope(ts: np.ndarray, times: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of time on T and its R^2."""
    ts = np.asarray(ts, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    t_c = ts - ts.mean()
    y_c = times - times.mean()
    slope = float(np.sum(t_c * y_c) / np.sum(t_c * t_c))
    pred = times.mean() + slope * t_c
    ss_res = float(np.sum((times - pred) ** 2))
    ss_tot = float(np.sum(y_c ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, r2
