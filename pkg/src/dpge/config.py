"""Run configuration: strict JSON parsing, defaults and validation.

Layout (privacy knobs live at the top level, everything else in sections)::

    {
      "mode": "pretrain",
      "target_epsilon": 5.0, "delta": 1e-6, "steps": 200,
      "noise_multiplier": 0.1, "clip_norm": 1.0,
      "model": {"num_layers": 2, ...},
      "dp": {"logical_batch_size": 256, "shard_size": 32, "peak_lr": 1e-3},
      "seeds": {"init": 0, "data": 1, "noise": 2, "dropout": 3}
    }
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .params import ModelConfig

RUN_MODES = ("plan", "account", "pretrain", "finetune", "bench")
BUDGET_MODES = ("fixed-steps", "stop-at-epsilon")
SNR_NOISE = ("realized", "expected")
MANIFEST_KEY = "dpge_manifest"


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        self.path, self.line = path, line
        where = path or "<config>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 1
    noise: int = 2
    dropout: int = 3

    @classmethod
    def from_base(cls, seed: int) -> "Seeds":
        return cls(seed, seed + 1, seed + 2, seed + 3)


@dataclass(frozen=True)
class DpSettings:
    logical_batch_size: int = 256
    shard_size: int = 32
    peak_lr: float = 1e-3
    weight_decay: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 5
    patience: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    num_train: int = 2000
    num_validation: int = 256
    num_test: int = 512
    seq_len: int = 32
    num_triggers: int = 4


@dataclass(frozen=True)
class BenchSettings:
    modes: Tuple[str, ...] = ("naive_loop", "vectorized", "sharded")
    batch_sizes: Tuple[int, ...] = (1, 8, 32, 64)
    epochs: int = 20
    dataset_size: int = 128
    measure_memory: bool = False


@dataclass(frozen=True)
class RunConfig:
    mode: str
    target_epsilon: Optional[float] = None
    delta: Optional[float] = None
    sampling_rate: Optional[float] = None
    steps: int = 200
    noise_multiplier: Optional[float] = None
    clip_norm: float = 1.0
    corpus_path: Optional[str] = None
    synthetic_tokens: int = 50000
    mask_rate: float = 0.15
    dupe_factor: int = 1
    validation_fraction: float = 0.05
    output_dir: str = "runs/latest"
    checkpoint_every: int = 0
    eval_every: int = 20
    budget_mode: str = "fixed-steps"
    init_checkpoint: Optional[str] = None
    snr_noise: str = "realized"
    plan_sigmas: Tuple[float, ...] = ()
    plan_format: str = "table"
    model: ModelConfig = field(default_factory=ModelConfig)
    dp: DpSettings = field(default_factory=DpSettings)
    seeds: Seeds = field(default_factory=Seeds)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        for key in ("plan_sigmas",):
            out[key] = list(out[key])
        out["bench"]["modes"] = list(out["bench"]["modes"])
        out["bench"]["batch_sizes"] = list(out["bench"]["batch_sizes"])
        return out


_SECTIONS = {"model": ModelConfig, "dp": DpSettings, "seeds": Seeds,
             "finetune": FinetuneSettings, "bench": BenchSettings}


def _line_of(text: str, key: str, start: int = 0) -> Optional[int]:
    m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, start)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _loads(text: str, source: str) -> dict:
    def hook(pairs):
        seen = set()
        for k, _ in pairs:
            if k in seen:
                raise ConfigError(f"duplicate key {k!r}", source, _line_of(text, k))
            seen.add(k)
        return dict(pairs)

    try:
        data = json.loads(text, object_pairs_hook=hook)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", source, exc.lineno) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", source, 1)
    return data


def _expect(value, kind, path, text, key):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "real": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)
        and math.isfinite(v),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
    }[kind]
    if not ok(value):
        raise ConfigError(f"expected {kind}, got {json.dumps(value)}", path,
                          _line_of(text, key) if text else None)
    return float(value) if kind == "real" else value


_TOP_TYPES = {
    "mode": "str", "target_epsilon": "real", "delta": "real", "sampling_rate": "real",
    "steps": "int", "noise_multiplier": "real", "clip_norm": "real", "corpus_path": "str",
    "synthetic_tokens": "int", "mask_rate": "real", "dupe_factor": "int",
    "validation_fraction": "real", "output_dir": "str", "checkpoint_every": "int",
    "eval_every": "int", "budget_mode": "str", "init_checkpoint": "str",
    "snr_noise": "str", "plan_format": "str",
}


def _section(cls, raw, name, source, text):
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", f"{source}:{name}", _line_of(text, name))
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, value in raw.items():
        path = f"{source}:{name}.{key}"
        if key not in known:
            raise ConfigError(f"unknown key {key!r} (allowed: {', '.join(sorted(known))})",
                              path, _line_of(text, key))
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError("expected a list", path, _line_of(text, key))
            kind = "str" if default and isinstance(default[0], str) else "int"
            kw[key] = tuple(_expect(v, kind, path, text, key) for v in value)
        elif isinstance(default, bool):
            kw[key] = _expect(value, "bool", path, text, key)
        elif isinstance(default, int):
            kw[key] = _expect(value, "int", path, text, key)
        else:
            kw[key] = _expect(value, "real", path, text, key)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), f"{source}:{name}", _line_of(text, name)) from None


def config_from_dict(data: dict, source: str = "<config>", text: str = "") -> RunConfig:
    """Build and validate a RunConfig from already-parsed JSON."""
    if MANIFEST_KEY in data:
        data = data.get("resolved_config")
        if not isinstance(data, dict):
            raise ConfigError("manifest has no resolved_config object", source)
        text = ""
    kw: Dict[str, Any] = {}
    for key, value in data.items():
        path = f"{source}:{key}"
        if key in _SECTIONS:
            kw[key] = _section(_SECTIONS[key], value, key, source, text)
        elif key == "plan_sigmas":
            if not isinstance(value, list):
                raise ConfigError("expected a list", path, _line_of(text, key))
            kw[key] = tuple(_expect(v, "real", path, text, key) for v in value)
        elif key in _TOP_TYPES:
            if value is None and key in ("target_epsilon", "delta", "sampling_rate",
                                         "noise_multiplier", "corpus_path",
                                         "init_checkpoint"):
                kw[key] = None
            else:
                kw[key] = _expect(value, _TOP_TYPES[key], path, text, key)
        else:
            raise ConfigError(f"unknown key {key!r}", path, _line_of(text, key))
    if "mode" not in kw:
        raise ConfigError("missing required key 'mode'", source)
    cfg = RunConfig(**kw)
    validate(cfg, source, text)
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    return config_from_dict(_loads(text, source), source, text)


def parse_config(file) -> RunConfig:
    """Parse a UTF-8 JSON config file (or an open text stream)."""
    if hasattr(file, "read"):
        return parse_config_text(file.read(), getattr(file, "name", "<config>"))
    path = Path(file)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"not valid UTF-8: {exc}", str(path)) from None
    return parse_config_text(text, str(path))


def validate(cfg: RunConfig, source: str = "<config>", text: str = "") -> None:
    def fail(key, msg):
        raise ConfigError(msg, f"{source}:{key}", _line_of(text, key) if text else None)

    if cfg.mode not in RUN_MODES:
        fail("mode", f"mode must be one of {RUN_MODES}, got {cfg.mode!r}")
    if cfg.target_epsilon is not None and not cfg.target_epsilon > 0:
        fail("target_epsilon", "target_epsilon must be > 0")
    if cfg.delta is not None and not 0 < cfg.delta < 1:
        fail("delta", f"delta must lie in (0, 1), got {cfg.delta!r}")
    if cfg.sampling_rate is not None and not 0 <= cfg.sampling_rate <= 1:
        fail("sampling_rate", "sampling_rate must lie in [0, 1]")
    if cfg.steps < 0:
        fail("steps", "steps must be >= 0")
    if cfg.noise_multiplier is not None and not cfg.noise_multiplier > 0:
        fail("noise_multiplier", "noise_multiplier must be > 0")
    if not cfg.clip_norm > 0:
        fail("clip_norm", "clip_norm must be > 0")
    if not 0 < cfg.validation_fraction < 1:
        fail("validation_fraction", "validation_fraction must lie in (0, 1)")
    if not 0 <= cfg.mask_rate <= 1:
        fail("mask_rate", "mask_rate must lie in [0, 1]")
    if cfg.budget_mode not in BUDGET_MODES:
        fail("budget_mode", f"budget_mode must be one of {BUDGET_MODES}")
    if cfg.snr_noise not in SNR_NOISE:
        fail("snr_noise", f"snr_noise must be one of {SNR_NOISE}")
    if cfg.plan_format not in ("table", "csv"):
        fail("plan_format", "plan_format must be 'table' or 'csv'")
    for key in ("synthetic_tokens", "dupe_factor", "eval_every"):
        if getattr(cfg, key) < 1:
            fail(key, f"{key} must be >= 1")
    if cfg.checkpoint_every < 0:
        fail("checkpoint_every", "checkpoint_every must be >= 0")
    if any(not s > 0 for s in cfg.plan_sigmas):
        fail("plan_sigmas", "plan_sigmas must be positive")
    dp = cfg.dp
    if dp.logical_batch_size < 1 or dp.shard_size < 1:
        fail("dp", "batch and shard sizes must be positive")
    if dp.shard_size > dp.logical_batch_size:
        fail("dp", "shard_size exceeds logical_batch_size")
    if not dp.peak_lr > 0 or dp.weight_decay < 0:
        fail("dp", "peak_lr must be > 0 and weight_decay >= 0")
    if not (0 < dp.adam_beta1 < 1 and 0 < dp.adam_beta2 < 1 and dp.adam_eps > 0):
        fail("dp", "adam betas must lie in (0, 1) and adam_eps > 0")
    ft = cfg.finetune
    if ft.epochs < 0 or ft.patience < 0 or ft.batch_size < 1 or not ft.lr > 0:
        fail("finetune", "epochs/patience must be >= 0, batch_size >= 1, lr > 0")
    if min(ft.num_train, ft.num_validation, ft.num_test) < 2:
        fail("finetune", "each finetune split needs at least 2 examples")
    if cfg.mode == "finetune" and ft.seq_len > cfg.model.max_seq_len:
        fail("finetune", "finetune.seq_len exceeds model.max_seq_len")
    from .bench import MODES
    bad = [m for m in cfg.bench.modes if m not in MODES]
    if bad:
        fail("bench", f"unknown bench modes {bad}; choose from {MODES}")
    if cfg.bench.epochs < 1 or any(b < 1 for b in cfg.bench.batch_sizes):
        fail("bench", "bench epochs and batch sizes must be positive")

    required = {
        "plan": ("target_epsilon", "sampling_rate"),
        "account": ("noise_multiplier", "sampling_rate"),
    }.get(cfg.mode, ())
    for key in required:
        if getattr(cfg, key) is None:
            fail(key, f"mode {cfg.mode!r} requires {key!r}")
    if cfg.mode in ("plan", "account") and cfg.delta is None:
        fail("delta", f"mode {cfg.mode!r} requires 'delta'")
    if cfg.mode == "pretrain":
        if cfg.noise_multiplier is None and cfg.target_epsilon is None:
            fail("noise_multiplier", "pretrain needs noise_multiplier or target_epsilon")
        if cfg.sampling_rate is not None:
            fail("sampling_rate", "pretrain derives sampling_rate as "
                 "logical_batch_size / dataset size; remove the key")
        if cfg.steps < 1:
            fail("steps", "pretrain needs steps >= 1")
        if cfg.budget_mode == "stop-at-epsilon" and cfg.target_epsilon is None:
            fail("budget_mode", "stop-at-epsilon needs target_epsilon")


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    """Copy with top-level fields replaced (None values are ignored), re-validated."""
    changes = {k: v for k, v in changes.items() if v is not None}
    out = replace(cfg, **changes)
    validate(out)
    return out
