"""Training configuration: defaults, flat key=value files, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    grad_clip_norm: float = 0.02
    clip_mode: str = "norm"  # "norm" scales by global norm; "value" clamps elements
    lambda_current: float = 0.9
    lambda_iso: float = 0.008
    lambda_align: float = 0.002
    literal_alignment: bool = False
    branch_len: int = 10
    embed_dim: int = 300
    gen_dim: int = 128
    rgcn_layers: int = 1
    gcn_layers: int = 1
    rgcn_nonlinearity: str = "sigmoid"
    gen_layers: int = 2
    gen_heads: int = 2
    max_positions: int = 256
    max_gen_len: int = 30
    max_epochs: int = 50
    convergence_patience: int = 3
    seed: int = 7

    def validate(self) -> "TrainConfig":
        positive = [
            "batch_size",
            "learning_rate",
            "grad_clip_norm",
            "branch_len",
            "embed_dim",
            "gen_dim",
            "rgcn_layers",
            "gcn_layers",
            "gen_layers",
            "gen_heads",
            "max_positions",
            "max_gen_len",
            "max_epochs",
            "convergence_patience",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_current",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lambda_iso < 0 or self.lambda_align < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.clip_mode not in ("norm", "value"):
            raise ConfigError("clip_mode must be 'norm' or 'value'")
        if self.rgcn_nonlinearity not in ("sigmoid", "relu"):
            raise ConfigError("rgcn_nonlinearity must be 'sigmoid' or 'relu'")
        if self.gen_dim % self.gen_heads != 0:
            raise ConfigError("gen_dim must be divisible by gen_heads")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: cannot read {raw!r} as a boolean")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    """Read `key = value` lines; '#' starts a comment, blanks are skipped."""
    values: Dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{line_no}: unknown setting {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(
    path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None
) -> TrainConfig:
    """Defaults, then file values, then overrides; validated at the end."""
    values: Dict[str, object] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), source=path))
    if overrides:
        for key, value in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown setting {key!r}")
            if isinstance(value, str):
                value = _coerce(key, value)
            values[key] = value
    return TrainConfig(**values).validate()
