"""Experiment configs: a flat section/key=value text format.

The parser validates against a per-kind schema, fills documented defaults,
and reports every problem at once with line numbers. ``emit`` writes the
canonical form (all keys explicit, schema order), so emit(parse(text))
round-trips to an identical config.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

from .errors import ConfigError

EXPERIMENT_KINDS = ("predict", "control", "gradcheck", "timing", "eigen")

# (type, default) per key; type is one of int, float, bool, str, "seeds",
# or a tuple of allowed strings.
_SCHEMA = {
    "experiment": {
        "kind": (EXPERIMENT_KINDS, "predict"),
        "steps": (int, 200_000),
        "seeds": ("seeds", [0]),
        "out": (str, ""),
        "window": (int, 5000),
        "log_every": (int, 100),
    },
    "architecture": {
        "kind": (("rtu", "lru", "blockdiag", "dense"), "rtu"),
        "variant": (("linear", "nonlinear"), "linear"),
        "n": (int, 40),
        "activation": (("identity", "relu", "tanh"), "relu"),
        "parameterization": (("exp_exp", "exp_neg", "direct", "sigmoid"), "exp_exp"),
        "r_min": (float, 0.0),
        "r_max": (float, 1.0),
        "max_phase": (float, 2.0 * math.pi),
        "learning_mode": (("rtrl", "tbptt"), "rtrl"),
        "truncation": (int, 25),
        "target_mode": (("td", "mc"), "td"),
    },
    "environment": {
        "kind": (("trace_conditioning", "three_state", "masked_cartpole", "tmaze"),
                 "trace_conditioning"),
        "isi_min": (int, 10),
        "isi_max": (int, 20),
        "cs_duration": (int, 4),
        "us_duration": (int, 2),
        "num_distractors": (int, 10),
        "distractor_rate": (float, 0.05),
        "iti_min": (int, 40),
        "iti_max": (int, 60),
        "discount_gamma": (float, 0.9),
        "mask": (("full", "positions_only", "velocities_only"), "positions_only"),
        "corridor_length": (int, 10),
    },
    "optimizer": {
        "lr": (float, 3e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "grad_clip": (float, 0.0),  # 0 disables clipping outside PPO
    },
    "ppo": {
        "buffer_size": (int, 2048),
        "epochs": (int, 10),
        "minibatches": (int, 32),
        "gae_lambda": (float, 0.95),
        "discount": (float, 0.99),
        "policy_clip": (float, 0.2),
        "value_clip": (float, 0.5),
        "grad_clip": (float, 0.5),
        "entropy_coef": (float, 0.01),
        "vf_coef": (float, 0.5),
        "encoder_hidden": (int, 64),
        "head_hidden": (int, 64),
        "normalize_advantages": (bool, True),
        "recompute_traces": (bool, False),
        "recompute_targets": (bool, False),
    },
}

_SECTIONS = tuple(_SCHEMA)


@dataclass
class ExperimentConfig:
    """One validated run description; block dicts carry every schema key."""

    kind: str
    steps: int
    seeds: list[int]
    out: str
    window: int
    log_every: int
    architecture: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)

    def block(self, name: str) -> dict:
        return getattr(self, name)

    def replace(self, section: str, key: str, value) -> "ExperimentConfig":
        """A copy with one value swapped (used by sweeps and CLI overrides)."""
        import copy

        new = copy.deepcopy(self)
        if section == "experiment":
            setattr(new, key, value)
        else:
            new.block(section)[key] = value
        return new


def _convert(raw: str, typ, line_no: int, key: str, problems: list[str]):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is str:
            return raw
        if typ == "seeds":
            return [int(tok) for tok in raw.split()]
        # tuple of choices
        if raw not in typ:
            problems.append(f"line {line_no}: {key} must be one of {', '.join(typ)}; got {raw!r}")
            return None
        return raw
    except ValueError:
        problems.append(f"line {line_no}: cannot parse {key} = {raw!r} as {getattr(typ, '__name__', typ)}")
        return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigError listing every problem found."""
    problems: list[str] = []
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    seen_lines: dict[tuple[str, str], int] = {}
    section = None
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                problems.append(f"line {line_no}: unknown section [{name}]")
                section = None
            else:
                section = name
            continue
        if "=" not in line:
            problems.append(f"line {line_no}: expected key = value, got {line!r}")
            continue
        if section is None:
            problems.append(f"line {line_no}: key outside any known section")
            continue
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        schema = _SCHEMA[section]
        if key not in schema:
            problems.append(f"line {line_no}: unknown key {key!r} in section [{section}]")
            continue
        prior = seen_lines.get((section, key))
        if prior is not None:
            problems.append(f"line {line_no}: duplicate key {key!r} in [{section}] "
                            f"(first set at line {prior})")
            continue
        seen_lines[(section, key)] = line_no
        converted = _convert(raw_value, schema[key][0], line_no, key, problems)
        if converted is not None:
            values[section][key] = converted

    if "kind" not in values["experiment"]:
        problems.append("missing required key kind in section [experiment]")
    if problems:
        raise ConfigError(problems)

    kind = values["experiment"]["kind"]
    required = {"predict": ("architecture", "environment"),
                "control": ("architecture", "environment")}.get(kind, ())
    for sec in required:
        if not values[sec]:
            problems.append(f"missing required section [{sec}] for kind {kind}")
    if problems:
        raise ConfigError(problems)

    filled = {}
    for sec, schema in _SCHEMA.items():
        block = {}
        for key, (_typ, default) in schema.items():
            block[key] = values[sec].get(key, default)
        filled[sec] = block

    cfg = ExperimentConfig(
        kind=kind,
        steps=filled["experiment"]["steps"],
        seeds=list(filled["experiment"]["seeds"]),
        out=filled["experiment"]["out"],
        window=filled["experiment"]["window"],
        log_every=filled["experiment"]["log_every"],
        architecture=filled["architecture"],
        environment=filled["environment"],
        optimizer=filled["optimizer"],
        ppo=filled["ppo"],
    )
    _validate_semantics(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate_semantics(cfg: ExperimentConfig, problems: list[str]):
    if cfg.architecture["n"] < 1:
        problems.append("architecture n must be >= 1")
    if not cfg.seeds:
        problems.append("seeds must not be empty")
    if cfg.steps < 1:
        problems.append("steps must be >= 1")
    if cfg.architecture["learning_mode"] == "tbptt" and cfg.architecture["truncation"] < 1:
        problems.append("truncation must be >= 1 for tbptt")
    ppo = cfg.ppo
    if ppo["buffer_size"] % ppo["minibatches"] != 0:
        problems.append("ppo buffer_size must be divisible by minibatches")
    if ppo["epochs"] < 1:
        problems.append("ppo epochs must be >= 1")
    for clip_key in ("policy_clip", "value_clip", "grad_clip"):
        if ppo[clip_key] <= 0:
            problems.append(f"ppo {clip_key} must be positive")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key explicit, schema order."""
    lines = []
    blocks = {
        "experiment": {"kind": cfg.kind, "steps": cfg.steps, "seeds": cfg.seeds,
                       "out": cfg.out, "window": cfg.window, "log_every": cfg.log_every},
        "architecture": cfg.architecture,
        "environment": cfg.environment,
        "optimizer": cfg.optimizer,
        "ppo": cfg.ppo,
    }
    for sec in _SECTIONS:
        lines.append(f"[{sec}]")
        for key in _SCHEMA[sec]:
            value = blocks[sec][key]
            if sec == "experiment" and key == "out" and value == "":
                lines.append("out =")
            else:
                lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()
