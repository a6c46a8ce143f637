"""Run configuration: dataclasses, profiles and the dotted key/value file format.

A config file is one ``key = value`` per line with dots for nesting::

    profile = desk
    data.n_samples = 2000
    train.lr_stage1 = 1e-3
    data.class_proportions = [0.0183, 0.1384, 0.3650, 0.4985]

Values are parsed as JSON when possible (numbers, booleans, lists, quoted
strings), otherwise taken verbatim as strings. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

# class index order shared with the loss and metric code
CLASSES = ("X", "M", "C", "O")

# 1,750 / 13,263 / 34,978 / 47,775 labelled samples
ARCHIVE_CLASS_COUNTS = (1750, 13263, 34978, 47775)


def _archive_proportions():
    total = sum(ARCHIVE_CLASS_COUNTS)
    return [c / total for c in ARCHIVE_CLASS_COUNTS]


@dataclass
class GeneratorConfig:
    n_samples: int = 2000
    height: int = 64
    width: int = 64
    raw_size: int = 128
    channels: int = 10
    history: int = 4
    lt_history: int = 672
    hours_per_year: int = 876
    sample_stride: int = 1
    horizon: int = 24
    class_proportions: list = field(default_factory=_archive_proportions)
    cycle_years: float = 11.0
    cycle_amplitude: float = 0.8
    ar_coef: float = 0.97
    ar_noise: float = 0.25
    n_blobs: int = 3
    blob_amplitude: float = 1.0
    pixel_noise: float = 0.02
    missing_rate: float = 0.01
    outage_rate: float = 0.002
    outage_hours: int = 6
    obs_jitter: float = 0.2
    late_rate: float = 0.005
    max_missing_fraction: float = 0.25
    shard_size: int = 256
    seed: int = 0

    def validate(self):
        _require(self.n_samples >= 1, "data.n_samples must be >= 1")
        _require(self.height >= 1 and self.width >= 1, "data.height/width must be >= 1")
        _require(self.raw_size >= max(self.height, self.width), "data.raw_size must be >= working size")
        _require(self.channels >= 1 and self.history >= 1, "data.channels/history must be >= 1")
        _require(self.lt_history >= 1, "data.lt_history must be >= 1")
        _require(self.hours_per_year >= 1 and self.sample_stride >= 1, "data.hours_per_year/sample_stride must be >= 1")
        _require(len(self.class_proportions) == len(CLASSES), "data.class_proportions needs 4 entries")
        _require(all(p > 0 for p in self.class_proportions), "data.class_proportions must be positive")
        _require(abs(sum(self.class_proportions) - 1) < 1e-6, "data.class_proportions must sum to 1")
        _require(0 <= self.ar_coef < 1, "data.ar_coef must be in [0,1)")
        _require(0 <= self.missing_rate < 1 and 0 <= self.outage_rate < 1, "data missing rates must be in [0,1)")
        _require(0 <= self.max_missing_fraction <= 1, "data.max_missing_fraction must be in [0,1]")
        _require(self.blob_amplitude >= 0, "data.blob_amplitude must be >= 0")


@dataclass
class SseConfig:
    stages: int = 3
    dim: int = 64
    channels: int = 10
    history: int = 4
    height: int = 256
    width: int = 256
    stem_stride: int = 2
    final_convs: int = 2
    state: int = 16
    mlp_ratio: int = 4
    dcsm_reduction: int = 4

    def validate(self):
        _require(self.stages >= 0 and self.dim >= 1 and self.state >= 1, "sse.stages/dim/state out of range")
        _require(self.stem_stride >= 1 and self.final_convs >= 0, "sse.stem_stride/final_convs out of range")
        h = _conv_out(self.height, 3, self.stem_stride, 1)
        w = _conv_out(self.width, 3, self.stem_stride, 1)
        _require(h >= 1 and w >= 1, "sse: stem leaves no spatial extent")
        for stage in range(self.stages):
            _require(h % 2 == 0 and w % 2 == 0,
                     f"sse: stage {stage + 1} input {h}x{w} is not even; downsampling needs even dims")
            h, w = h // 2, w // 2

    def stage_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after the stem and after each stage."""
        h = _conv_out(self.height, 3, self.stem_stride, 1)
        w = _conv_out(self.width, 3, self.stem_stride, 1)
        sizes = [(h, w)]
        for _ in range(self.stages):
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes

    def final_size(self) -> tuple[int, int]:
        h, w = self.stage_sizes()[-1]
        for _ in range(self.final_convs):
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        return h, w

    @property
    def seq_len(self) -> int:
        """L = C * H_f * W_f, the flattened length of the encoder output."""
        h, w = self.final_size()
        return self.channels * h * w


@dataclass
class MaeConfig:
    patch: int = 8
    alpha: float = 20.0
    r_l: float = 0.3
    r_h: float = 0.5
    r_f: float = 0.5
    enc_layers: int = 8
    dec_layers: int = 12
    dim: int = 128
    heads: int = 4
    history: int = 672
    channels: int = 10
    height: int = 256
    width: int = 256
    phase_aware: bool = True
    uniform_ratio: float = 0.75
    epochs: int = 20
    batch_size: int = 32
    lr: float = 4e-3
    weight_decay: float = 5e-2
    finetune: bool = False

    def validate(self):
        _require(0 <= self.alpha <= 100, "mae.alpha must be a percentage")
        _require(0 <= self.r_l < self.r_h <= 1 or (self.r_l == self.r_h == 0),
                 "mae ratios need 0 <= r_l < r_h <= 1")
        _require(0 <= self.r_f <= 1, "mae.r_f must be in [0,1]")
        _require(self.patch >= 1 and self.height % self.patch == 0 and self.width % self.patch == 0,
                 "mae.patch must divide the image size")
        _require(self.dim % self.heads == 0, "mae.dim must be divisible by mae.heads")
        _require(self.enc_layers >= 1 and self.dec_layers >= 1, "mae layer counts must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch


@dataclass
class HeadConfig:
    lt_blocks: int = 1
    state: int = 16
    mlp_ratio: int = 4
    ffn_hidden: int = 64
    strides: list = field(default_factory=list)

    def validate(self):
        _require(self.lt_blocks >= 0, "head.lt_blocks must be >= 0")


@dataclass
class LossConfig:
    ce: float = 1.0
    bss: float = 2.0
    gmgs: float = 1.0
    smoothing: float = 0.1
    log_clamp: float = 1e-12

    def validate(self):
        _require(min(self.ce, self.bss, self.gmgs) >= 0, "loss weights must be >= 0")
        _require(0 <= self.smoothing < 1, "loss.smoothing must be in [0,1)")


@dataclass
class TrainConfig:
    epochs_stage1: int = 20
    epochs_stage2: int = 15
    batch_size: int = 32
    lr_stage1: float = 4e-5
    lr_stage2: float = 4e-5
    weight_decay_stage1: float = 5e-2
    weight_decay_stage2: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.95
    crt_scope: str = "head"
    crt_reinit: bool = True
    crt_per_class: int = 0
    augment: float = 1.0
    grad_clip: float = 1.0

    def validate(self):
        _require(self.epochs_stage1 >= 0 and self.epochs_stage2 >= 0, "train epochs must be >= 0")
        _require(self.batch_size >= 1, "train.batch_size must be >= 1")
        _require(self.lr_stage1 > 0 and self.lr_stage2 > 0, "train learning rates must be > 0")
        _require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "train betas must be in [0,1)")
        _require(self.crt_scope in ("head", "all"), "train.crt_scope must be 'head' or 'all'")
        _require(self.augment >= 0, "train.augment must be >= 0")


@dataclass
class RunConfig:
    profile: str = "full"
    seed: int = 0
    fold: int = 3
    out: str = "runs/default"
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    sse: SseConfig = field(default_factory=SseConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def sync(self) -> "RunConfig":
        """Propagate the shared data dimensions into the model sections."""
        d = self.data
        for sec in (self.sse, self.mae):
            sec.channels = d.channels
            sec.height = d.height
            sec.width = d.width
        self.sse.history = d.history
        self.mae.history = d.lt_history
        return self

    def validate(self) -> "RunConfig":
        _require(self.fold in (1, 2, 3), "fold must be 1, 2 or 3")
        for sec in (self.data, self.sse, self.mae, self.head, self.loss, self.train):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "\n".join(f"{k} = {json.dumps(v)}" for k, v in _flatten(self.to_dict())) + "\n"


PROFILES: dict[str, dict[str, Any]] = {
    "full": {
        "data.height": 256,
        "data.width": 256,
        "data.raw_size": 1024,
        "data.lt_history": 672,
        "mae.patch": 16,
    },
    "desk": {
        "data.n_samples": 2000,
        "data.height": 32,
        "data.width": 32,
        "data.raw_size": 64,
        "data.channels": 4,
        "data.history": 4,
        "data.lt_history": 64,
        "data.sample_stride": 3,
        "sse.dim": 32,
        "sse.state": 16,
        "sse.mlp_ratio": 2,
        "head.state": 16,
        "head.mlp_ratio": 2,
        "head.ffn_hidden": 32,
        "mae.dim": 64,
        "mae.enc_layers": 2,
        "mae.dec_layers": 2,
        "mae.epochs": 5,
        "mae.batch_size": 64,
        "mae.lr": 1e-3,
        "train.epochs_stage1": 10,
        "train.epochs_stage2": 5,
        "train.lr_stage1": 1e-3,
        "train.lr_stage2": 1e-3,
    },
    "tiny": {
        "data.n_samples": 600,
        "data.height": 16,
        "data.width": 16,
        "data.raw_size": 32,
        "data.channels": 2,
        "data.history": 2,
        "data.lt_history": 8,
        "data.hours_per_year": 100,
        "data.sample_stride": 1,
        "sse.stages": 1,
        "sse.dim": 4,
        "sse.state": 2,
        "sse.mlp_ratio": 1,
        "head.state": 2,
        "head.mlp_ratio": 1,
        "head.ffn_hidden": 4,
        "mae.patch": 8,
        "mae.dim": 4,
        "mae.heads": 1,
        "mae.enc_layers": 1,
        "mae.dec_layers": 1,
        "mae.epochs": 1,
        "mae.batch_size": 32,
        "mae.lr": 1e-3,
        "train.epochs_stage1": 1,
        "train.epochs_stage2": 1,
        "train.batch_size": 16,
        "train.lr_stage1": 1e-3,
        "train.lr_stage2": 1e-3,
    },
}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return str(value)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    for key, value in overrides.items():
        target: Any = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(target) or part not in {f.name for f in fields(target)}:
                raise ConfigError(f"unknown config section in {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        if not dataclasses.is_dataclass(target) or name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(target, name, _coerce(value, current, key))
    return cfg


def make_config(overrides: dict[str, Any] | None = None, profile: str | None = None) -> RunConfig:
    """Build a validated config from a profile plus dotted overrides."""
    overrides = dict(overrides or {})
    profile = profile or overrides.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    apply_overrides(cfg, PROFILES[profile])
    apply_overrides(cfg, overrides)
    return cfg.sync().validate()


def load_config(path: str | Path, **extra) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    overrides = parse_text(text)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return make_config(overrides)
