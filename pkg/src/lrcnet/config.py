"""Model/training configuration and the ``key = value`` run-config format."""
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np


class ConfigError(ValueError):
    pass


AGGREGATIONS = ("intra", "mean", "max", "concat")
POOLS = ("max", "mean", "sum")
TASKS = ("classify", "segment")


@dataclass
class ModelConfig:
    """Network shape and ablation switches.

    num_regions is M, scales holds the K_t (so T = len(scales)), region_dim
    is D and filter_kinds is H (defaults to T).
    """
    task: str = "classify"
    num_regions: int = 384
    scales: Tuple[int, ...] = (16, 32, 64, 128)
    region_dim: int = 128
    gamma: float = 1e4
    filter_kinds: Optional[int] = None
    num_classes: int = 40
    num_parts: int = 50
    aggregation: str = "intra"
    inter_region: bool = True
    global_pool: str = "max"
    dropout: float = 0.4
    precision: str = "float64"
    normalize: bool = True
    area_mlp: Tuple[int, ...] = (64, 128)
    global_mlp: Tuple[int, ...] = (256, 512, 1024)
    head_mlp: Tuple[int, ...] = (512, 256)
    seg_skip_mlp: Tuple[int, ...] = (32,)
    seg_region_mlp: Tuple[int, ...] = (256, 128)
    seg_point_mlp: Tuple[int, ...] = (256, 128)

    def __post_init__(self):
        self.scales = tuple(int(k) for k in self.scales)
        for name in ("area_mlp", "global_mlp", "head_mlp", "seg_skip_mlp", "seg_region_mlp", "seg_point_mlp"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.filter_kinds is None:
            self.filter_kinds = len(self.scales)
        self.validate()

    @property
    def T(self):
        return len(self.scales)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if not self.scales or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be non-empty and strictly increasing: {self.scales}")
        if self.scales[0] < 1 or self.num_regions < 1 or self.region_dim < 1:
            raise ConfigError("num_regions, scales and region_dim must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not 1 <= self.filter_kinds <= self.T:
            raise ConfigError(f"filter_kinds must lie in [1, {self.T}]")
        if self.filter_kinds > self.region_dim:
            raise ConfigError("filter_kinds cannot exceed region_dim")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.global_pool not in POOLS:
            raise ConfigError(f"global_pool must be one of {POOLS}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.num_classes < 1 or self.num_parts < 1:
            raise ConfigError("num_classes and num_parts must be positive")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.3
    decay_every: int = 20
    lr_floor: float = 1e-5
    train_manifest: str = ""
    test_manifest: str = ""
    # stop as soon as the test metric reaches this value (0 disables)
    target_metric: float = 0.0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.lr_floor < 0 or not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise ConfigError("invalid learning-rate schedule")


def tiny_config(**kw):
    """Small shapes used for gradient checks (N = 64 inputs)."""
    base = dict(num_regions=8, scales=(4, 8), region_dim=8, num_classes=4, num_parts=4,
                gamma=1.0, precision="float64")
    base.update(kw)
    return ModelConfig(**base)


def desk_config(**kw):
    """Default for the 256-point synthetic datasets."""
    base = dict(num_regions=64, scales=(8, 16, 32, 64), region_dim=64, num_classes=4,
                num_parts=5, gamma=100.0, precision="float32")
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_EXTRA_KEYS = {"seed", "threads", "out"}


def _parse_value(key, text):
    fld = _MODEL_KEYS.get(key) or _TRAIN_KEYS.get(key)
    text = text.strip()
    if key in ("seed", "threads"):
        return int(text)
    if key == "out":
        return text
    default = fld.default if fld.default is not dataclasses.MISSING else None
    if key == "filter_kinds":
        return None if text.lower() in ("", "none", "auto") else int(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "y"):
            return True
        if low in ("false", "no", "0", "n"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "auto"
    return str(v)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 7
    threads: int = 0
    out: str = "./runs"
    sweep: Dict[str, List] = field(default_factory=dict)


def parse_run_config(text, base=None):
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors.

    ``sweep.<key> = v1 | v2 | ...`` lines declare a sweep grid.
    """
    base = base or RunConfig()
    model_kw = dataclasses.asdict(base.model)
    train_kw = dataclasses.asdict(base.train)
    extra = {"seed": base.seed, "threads": base.threads, "out": base.out}
    sweep = dict(base.sweep)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        seen.add(key)
        try:
            if key.startswith("sweep."):
                sub = key[len("sweep."):]
                if sub not in _MODEL_KEYS and sub not in _TRAIN_KEYS:
                    raise ConfigError(f"line {lineno}: unknown sweep key {sub!r}")
                sweep[sub] = [_parse_value(sub, v) for v in value.split("|")]
            elif key in _MODEL_KEYS:
                model_kw[key] = _parse_value(key, value)
            elif key in _TRAIN_KEYS:
                train_kw[key] = _parse_value(key, value)
            elif key in _EXTRA_KEYS:
                extra[key] = _parse_value(key, value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if "filter_kinds" not in seen and base.model.filter_kinds == base.model.T:
        # an inherited default follows the (possibly new) number of scales
        model_kw["filter_kinds"] = None
    model = ModelConfig(**model_kw)
    train = TrainConfig(**train_kw)
    train.validate()
    return RunConfig(model, train, extra["seed"], extra["threads"], extra["out"], sweep)


def load_run_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(encoding="utf-8"))


def format_run_config(rc):
    lines = [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(rc.model).items()]
    lines += [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(rc.train).items()]
    lines += [f"seed = {rc.seed}", f"threads = {rc.threads}", f"out = {rc.out}"]
    for k, vals in rc.sweep.items():
        lines.append(f"sweep.{k} = " + " | ".join(_format_value(v) for v in vals))
    return "\n".join(lines) + "\n"
