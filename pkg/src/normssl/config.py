"""Experiment configuration: flat key=value text, named presets, canonical hash."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .norms import NormScheme


class ConfigError(ValueError):
    pass


# Fields that do not change what a run computes; excluded from the hash.
NON_SEMANTIC = frozenset({"name"})
BYOL_ONLY = frozenset({"predictor", "predictor_norm", "target_decay", "ema_literal"})
SIMCLR_ONLY = frozenset({"tau"})


@dataclass
class ExperimentConfig:
    name: str = "custom"
    objective: str = "byol"  # byol | simclr
    encoder_norm: str = "bn"
    projector_norm: str = "bn"
    predictor_norm: str = "bn"
    predictor: str = "mlp"  # mlp | identity
    ws: bool = False
    init: str = "standard"  # standard | bn-capture-reinit
    optimizer: str = "lars"  # lars | sgd
    lr: float = 0.2
    weight_decay: float = 1.5e-6
    momentum: float = 0.9
    trust_coeff: float = 0.02
    tau: float = 0.1
    target_decay: float = 0.996
    ema_literal: bool = False
    warmup_epochs: float = 10.0
    reference_epochs: int = 1000
    epochs: int = 40
    batch_size: int = 64
    groups: int = 16
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    norm_eps: float = 1e-5
    ws_eps: float = 1e-4
    stat_floor: float = 1e-3
    seed: int = 0
    dataset: str = "synthetic"  # synthetic | cifar-bin:<path>
    data_seed: int = 0
    n_train: int = 512
    n_test: int = 512
    image_size: int = 32
    num_classes: int = 10
    augment: bool = True
    widths: str = "16,32,64"
    blocks_per_stage: int = 2
    hidden_dim: int = 128
    proj_dim: int = 64
    collapse_std: float = 1e-3
    collapse_cos: float = 0.99
    probe_c: float = 1.0
    eval_size: int = 256

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------------
    def validate(self) -> None:
        if self.objective not in ("byol", "simclr"):
            raise ConfigError(f"objective must be byol or simclr, got {self.objective!r}")
        for key in ("encoder_norm", "projector_norm", "predictor_norm"):
            try:
                setattr(self, key, NormScheme(getattr(self, key)).kind)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if self.predictor not in ("mlp", "identity"):
            raise ConfigError("predictor must be mlp or identity")
        if self.init not in ("standard", "bn-capture-reinit"):
            raise ConfigError("init must be standard or bn-capture-reinit")
        if self.optimizer not in ("lars", "sgd"):
            raise ConfigError("optimizer must be lars or sgd")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.target_decay <= 1:
            raise ConfigError("target_decay must lie in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 1 or self.reference_epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.reference_epochs:
            raise ConfigError("warmup_epochs must lie in [0, reference_epochs]")
        if self.groups < 1:
            raise ConfigError("groups must be positive")
        if self.init == "bn-capture-reinit" and "bn" not in self.norm_kinds():
            raise ConfigError("bn-capture-reinit needs at least one bn component to remove")
        try:
            ws = self.width_list()
        except ValueError:
            raise ConfigError(f"widths must be comma-separated integers, got {self.widths!r}") from None
        if not ws or min(ws) < 1:
            raise ConfigError("widths must be positive")
        if self.dataset != "synthetic" and not self.dataset.startswith("cifar-bin:"):
            raise ConfigError("dataset must be 'synthetic' or 'cifar-bin:<path>'")

    def width_list(self) -> list[int]:
        return [int(w) for w in str(self.widths).split(",") if w.strip()]

    def norm_kinds(self) -> tuple[str, str, str]:
        pred = self.predictor_norm if self.objective == "byol" else "none"
        return self.encoder_norm, self.projector_norm, pred

    def norm_scheme(self, kind: str) -> NormScheme:
        eps = self.bn_eps if kind == "bn" else self.norm_eps
        return NormScheme(kind, groups=self.groups, eps=eps, momentum=self.bn_momentum)

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in NON_SEMANTIC:
                continue
            if f.name in (BYOL_ONLY if self.objective == "simclr" else SIMCLR_ONLY):
                continue
            lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def dumps(self) -> str:
        return f"name={self.name}\n" + self.canonical()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return apply_overrides(self, changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(field_type, raw: str, key: str):
    raw = raw.strip()
    try:
        if field_type in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if field_type in ("int", int):
            return int(raw)
        if field_type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    values = cfg.to_dict()
    for key, val in overrides.items():
        key = key.strip().replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(_FIELD_TYPES[key], val, key) if isinstance(val, str) else val
    return ExperimentConfig(**values)


# Reference hyperparameters per variant. The desk-scale fields (epochs, widths,
# dataset size) come from the ExperimentConfig defaults.
PRESETS: dict[str, dict] = {
    "vanilla-bn": dict(
        name="vanilla-bn", objective="byol", encoder_norm="bn", projector_norm="bn", predictor_norm="bn",
        lr=0.2, weight_decay=1.5e-6, target_decay=0.996, warmup_epochs=10.0,
    ),
    "no-bn": dict(
        name="no-bn", objective="byol", encoder_norm="none", projector_norm="none", predictor_norm="none",
        lr=0.2, weight_decay=1.5e-6, target_decay=0.996, warmup_epochs=10.0,
    ),
    "modified-init": dict(
        name="modified-init", objective="byol", encoder_norm="bn", projector_norm="bn", predictor_norm="bn",
        init="bn-capture-reinit", lr=0.2, weight_decay=1.5e-6, target_decay=0.996, warmup_epochs=50.0,
    ),
    "gn-ws": dict(
        name="gn-ws", objective="byol", encoder_norm="gn", projector_norm="gn", predictor_norm="gn",
        ws=True, groups=16, lr=0.24, weight_decay=3e-8, target_decay=0.999, warmup_epochs=10.0,
    ),
    "simclr-bn": dict(
        name="simclr-bn", objective="simclr", encoder_norm="bn", projector_norm="bn", predictor_norm="none",
    ),
    "simclr-ln": dict(
        name="simclr-ln", objective="simclr", encoder_norm="ln", projector_norm="ln", predictor_norm="none",
    ),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    return apply_overrides(ExperimentConfig(), {**base, **overrides})


def parse_text(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` lines. A ``preset`` key (any position)
    selects the base; every other key overrides it. ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    base = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            base = val
        else:
            pairs[key] = val
    cfg = preset(base) if base else ExperimentConfig()
    return apply_overrides(cfg, pairs)


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)
