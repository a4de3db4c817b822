"""Run configuration: defaults, config-file parsing, flag merging, echo.

Precedence is exactly defaults < config file < command-line flags. The
config file is flat ``key = value`` text whose keys mirror the flag names;
the effective configuration is echoed into every output directory so a run
can be reproduced by feeding the echo back via ``--config``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

from .corpus import (
    DEFAULT_QUALITY_THRESHOLDS,
    DEFAULT_RESOLUTION_FLOOR,
    LOW_QUALITY,
    OCR_SUBTITLE,
    PORTRAIT,
)
from .errors import ConfigError
from .fusion import STRATEGIES

MODALITY_ORDER = ("text", "image", "caption")
SPLIT_SPEC = "80/10/10"
CONFIG_ECHO_NAME = "run.config"


@dataclass
class RunConfig:
    seed: int = 42
    batch_size: int = 100
    learning_rate: float = 5e-5
    max_epochs: int = 20
    patience: int = 5
    heads: int = 6
    hidden_size: int = 768
    grid_side: int = 14
    raw_channels: int = 2048
    text_cap: int = 20
    caption_cap: int = 20
    modalities: str = "text,image,caption"
    fusion: str = "multihead"
    text_backend: str = "stub:42"
    image_backend: str = "stub:42"
    caption_source: str = "precomputed"
    captions_file: str = ""
    split: str = SPLIT_SPEC  # fixed proportions, kept for provenance
    portrait_threshold: float = DEFAULT_QUALITY_THRESHOLDS[PORTRAIT]
    low_quality_threshold: float = DEFAULT_QUALITY_THRESHOLDS[LOW_QUALITY]
    ocr_subtitle_threshold: float = DEFAULT_QUALITY_THRESHOLDS[OCR_SUBTITLE]
    resolution_floor: int = DEFAULT_RESOLUTION_FLOOR

    def modality_set(self) -> frozenset[str]:
        return parse_modalities(self.modalities)

    def quality_thresholds(self) -> dict[str, float]:
        return {
            PORTRAIT: self.portrait_threshold,
            LOW_QUALITY: self.low_quality_threshold,
            OCR_SUBTITLE: self.ocr_subtitle_threshold,
        }


def parse_modalities(value: str) -> frozenset[str]:
    names = [part.strip() for part in value.split(",") if part.strip()]
    unknown = [name for name in names if name not in MODALITY_ORDER]
    if unknown:
        raise ConfigError(f"unknown modalities {unknown}; choose from {list(MODALITY_ORDER)}")
    if not names:
        raise ConfigError("at least one modality is required")
    return frozenset(names)


def canonical_modalities(modalities) -> str:
    return ",".join(name for name in MODALITY_ORDER if name in set(modalities))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value) -> object:
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': {value!r}") from None
    return value


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read flat ``key = value`` lines; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {lineno} in {path}: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}' at line {lineno} in {path}")
        values[key] = value
    return values


def make_run_config(
    config_file: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Merge defaults, a config file, and flag overrides, then validate."""
    values = asdict(RunConfig())
    if config_file is not None:
        for key, value in parse_config_file(config_file).items():
            values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.split != SPLIT_SPEC:
        raise ConfigError(f"split proportions are fixed at {SPLIT_SPEC}")
    if cfg.fusion not in STRATEGIES:
        raise ConfigError(f"unknown fusion strategy '{cfg.fusion}'; choose from {list(STRATEGIES)}")
    parse_modalities(cfg.modalities)
    if cfg.heads < 1 or cfg.hidden_size % cfg.heads != 0:
        raise ConfigError(
            f"hidden size {cfg.hidden_size} must be divisible by heads {cfg.heads}"
        )
    if not 1 <= cfg.text_cap <= 20:
        raise ConfigError(f"text cap must be in 1..20, got {cfg.text_cap}")
    if not 1 <= cfg.caption_cap <= 20:
        raise ConfigError(f"caption cap must be in 1..20, got {cfg.caption_cap}")
    if cfg.grid_side < 1:
        raise ConfigError(f"grid side must be >= 1, got {cfg.grid_side}")
    for name in ("batch_size", "max_epochs", "patience", "raw_channels", "resolution_floor"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.learning_rate < 0:
        raise ConfigError("learning rate must be >= 0")


def config_lines(cfg: RunConfig) -> list[str]:
    lines = []
    for field in fields(RunConfig):
        value = getattr(cfg, field.name)
        lines.append(f"{field.name} = {value!r}" if isinstance(value, float) else f"{field.name} = {value}")
    return lines


def write_config_echo(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_ECHO_NAME
    path.write_text("\n".join(config_lines(cfg)) + "\n", encoding="utf-8")
    return path
