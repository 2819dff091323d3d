"""Flat key=value configuration shared by the CLI and the training pipeline.

One dataclass holds every tunable of both stages. Config files are plain
text, one `key = value` per line, `#` comments; list values are comma
separated. Field types drive the parsing, so adding a field to the
dataclass is all it takes to accept it from a file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text or an out-of-range value; names the key."""


@dataclass
class PipelineConfig:
    """Every knob of the two-stage inspector, with desk-scale defaults."""

    seed: int = 0
    working_size: int = 512
    scales: tuple[int, ...] = (64, 128, 256)
    ratios: tuple[float, ...] = (1.0, 0.5, 2.0)
    stride_fraction: float = 0.5

    # stage 1: patch screener
    stage1_input: int = 128
    stage1_channels: tuple[int, ...] = (8, 16, 24, 32)
    alpha: float = 1.0  # weight of the localization term in the multibox loss
    neg_pos_ratio: int = 3
    match_threshold: float = 0.5  # min overlap for an anchor/roi to join a gt box
    selection_threshold: float = 0.5
    nms_threshold: float = 0.45
    stage1_epochs: int = 4
    stage1_lr: float = 0.05
    stage1_patches: int = 10  # patches sampled per image per epoch

    # stage 2: patch segmenter
    stage2_input: int = 128
    stage2_channels: tuple[int, ...] = (8, 12, 16, 16)
    fpn_channels: int = 8
    roi_size: int = 7
    mask_roi_size: int = 14
    roi_hidden: int = 32
    mask_channels: int = 8
    samples_per_bin: int = 2
    rpn_nms_threshold: float = 0.7
    rpn_top_k: int = 100
    rpn_pre_nms_k: int = 64
    max_rois: int = 24
    detection_threshold: float = 0.5
    mask_threshold: float = 0.5
    stage2_epochs: int = 4
    stage2_lr: float = 0.02
    stage2_patches: int = 4  # patches sampled per image per epoch

    momentum: float = 0.9
    grad_clip: float = 5.0

    def __post_init__(self):
        _positive_int(self, "working_size", "stage1_input", "stage2_input",
                      "roi_size", "mask_roi_size", "roi_hidden", "mask_channels",
                      "fpn_channels", "samples_per_bin", "rpn_top_k",
                      "rpn_pre_nms_k", "max_rois", "stage1_patches", "stage2_patches")
        _non_negative(self, "stage1_epochs", "stage2_epochs", "neg_pos_ratio")
        _positive(self, "stage1_lr", "stage2_lr", "alpha", "grad_clip")
        _unit_interval(self, "selection_threshold", "nms_threshold",
                       "rpn_nms_threshold", "detection_threshold",
                       "mask_threshold", "stride_fraction", "match_threshold")
        if len(self.stage1_channels) != 4:
            raise ConfigError(
                f"stage1_channels needs exactly 4 entries, got {len(self.stage1_channels)}")
        if len(self.stage2_channels) != 4:
            raise ConfigError(
                f"stage2_channels needs exactly 4 entries, got {len(self.stage2_channels)}")
        if self.stage1_input % 32 != 0:
            raise ConfigError(f"stage1_input must be a multiple of 32, got {self.stage1_input}")
        if self.stage2_input % 64 != 0:
            raise ConfigError(f"stage2_input must be a multiple of 64, got {self.stage2_input}")
        if not self.scales:
            raise ConfigError("scales must name at least one patch size")
        if min(self.scales) < 8:
            raise ConfigError(f"scales below 8 pixels are not usable, got {self.scales}")
        if self.working_size < min(self.scales):
            raise ConfigError(
                f"working_size {self.working_size} is smaller than the smallest "
                f"patch scale {min(self.scales)}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"ratios must be positive, got {self.ratios}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def _positive_int(cfg, *names):
    for n in names:
        if getattr(cfg, n) < 1:
            raise ConfigError(f"{n} must be >= 1, got {getattr(cfg, n)}")


def _non_negative(cfg, *names):
    for n in names:
        if getattr(cfg, n) < 0:
            raise ConfigError(f"{n} must be >= 0, got {getattr(cfg, n)}")


def _positive(cfg, *names):
    for n in names:
        if getattr(cfg, n) <= 0:
            raise ConfigError(f"{n} must be > 0, got {getattr(cfg, n)}")


def _unit_interval(cfg, *names):
    for n in names:
        v = getattr(cfg, n)
        if not (0.0 < v <= 1.0):
            raise ConfigError(f"{n} must lie in (0, 1], got {v}")


def config_field_types() -> dict[str, type]:
    """Resolved type per config field (postponed annotations and all)."""
    hints = typing.get_type_hints(PipelineConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(PipelineConfig)}


def _convert(name: str, hint: type, raw: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"config key {name!r}: empty list value")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_scalar(name, args[0], p) for p in parts)
        if len(parts) != len(args):  # fixed-arity tuple such as (H, W)
            raise ConfigError(
                f"config key {name!r}: expected {len(args)} values, got {len(parts)}")
        return tuple(_scalar(name, a, p) for a, p in zip(args, parts))
    return _scalar(name, hint, raw)


def _scalar(name: str, kind: type, raw: str):
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _parse_flat(text: str, hints: dict[str, type]) -> dict[str, object]:
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in seen:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        seen[key] = _convert(key, hints[key], raw)
    return seen


def parse_config(text: str) -> PipelineConfig:
    """Parse `key = value` lines into a validated PipelineConfig."""
    return PipelineConfig(**_parse_flat(text, config_field_types()))


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def parse_synthetic_spec(text: str):
    """Parse the same key = value grammar into a data.SyntheticSpec."""
    from .data import SyntheticSpec

    resolved = typing.get_type_hints(SyntheticSpec)
    hints = {f.name: resolved[f.name] for f in dataclasses.fields(SyntheticSpec)}
    try:
        return SyntheticSpec(**_parse_flat(text, hints))
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None


def load_synthetic_spec(path: str | Path):
    return parse_synthetic_spec(Path(path).read_text())


def dump_config(config: PipelineConfig) -> str:
    """Render a config as parseable key = value lines (round-trips exactly)."""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            rendered = ", ".join(_plain(v) for v in value)
        else:
            rendered = _plain(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def _plain(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
