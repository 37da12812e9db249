"""Construct cells, environments, and optimizers from config blocks.

Seeds feed a counter-based generator (Philox) with one key per named
substream, so environment dynamics, parameter initialization, and policy
sampling draw from independent streams.
"""

from __future__ import annotations

import numpy as np

from .baselines import (BlockDiagCell, LruCell, init_blockdiag_params, init_lru_params)
from .core import RtuCell, init_rtu_params
from .envs import (MaskedCartpole, ThreeStateMdp, TMaze, TraceConditioning,
                   TraceConditioningConfig)
from .errors import ConfigError
from .optim import AdamState

STREAM_INIT = 0
STREAM_ENV = 1
STREAM_POLICY = 2


def stream_key(seed: int, stream: int) -> int:
    return (int(seed) << 8) | stream


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(key=stream_key(seed, stream)))


def build_cell(arch: dict, in_dim: int, rng: np.random.Generator, *,
               lru_out_dim: int = 1):
    kind = arch["kind"]
    if kind == "rtu":
        params = init_rtu_params(
            rng, arch["n"], in_dim,
            variant=arch["variant"], activation=arch["activation"],
            parameterization=arch["parameterization"],
            r_min=arch["r_min"], r_max=arch["r_max"], max_phase=arch["max_phase"])
        return RtuCell(params)
    if kind == "lru":
        return LruCell(init_lru_params(
            rng, arch["n"], in_dim, lru_out_dim,
            r_min=arch["r_min"], r_max=arch["r_max"], max_phase=arch["max_phase"]))
    if kind == "blockdiag":
        return BlockDiagCell(init_blockdiag_params(
            rng, arch["n"], in_dim, activation=arch["activation"]))
    raise ConfigError([f"architecture kind {kind!r} has no cell builder"])


def build_environment(env: dict, seed: int):
    kind = env["kind"]
    key = stream_key(seed, STREAM_ENV)
    if kind == "trace_conditioning":
        cfg = TraceConditioningConfig(
            isi_min=env["isi_min"], isi_max=env["isi_max"],
            cs_duration=env["cs_duration"], us_duration=env["us_duration"],
            num_distractors=env["num_distractors"], distractor_rate=env["distractor_rate"],
            iti_min=env["iti_min"], iti_max=env["iti_max"],
            discount_gamma=env["discount_gamma"])
        return TraceConditioning(cfg, seed=key)
    if kind == "three_state":
        return ThreeStateMdp(seed=key)
    if kind == "masked_cartpole":
        return MaskedCartpole(mask=env["mask"], seed=key)
    if kind == "tmaze":
        return TMaze(corridor_length=env["corridor_length"], seed=key)
    raise ConfigError([f"unknown environment kind {kind!r}"])


def build_adam(opt: dict) -> AdamState:
    return AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
