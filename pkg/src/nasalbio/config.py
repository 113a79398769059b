"""Flat ``section.key = value`` configuration for the whole pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .geometry import CropConfig
from .landmarks import LandmarkConfig
from .selection import GAConfig, KFAParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    resolution: float = 0.5
    median_mm: float = 2.5
    median_passes: int = 2
    align: bool = True
    align_max_iter: int = 10
    align_tol_deg: float = 0.1
    tip_percentile: float = 98.0
    crop_vertical_radius: float = 40.0
    crop_upper_margin: float = 15.0
    crop_lower_radius: float = 25.0
    crop_default_root_offset: float = 40.0
    crop_max_removed_fraction: float = 0.95

    def crop(self) -> CropConfig:
        return CropConfig(self.crop_vertical_radius, self.crop_upper_margin, self.crop_lower_radius,
                          self.crop_default_root_offset, self.crop_max_removed_fraction)


@dataclass(frozen=True)
class GaborConfig:
    s_m: int = 4
    o_m: int = 4
    omega_low: float = 0.05
    omega_high: float = 0.7
    confidence_factor: float = 1.0


@dataclass(frozen=True)
class DescriptorConfig:
    patch_radius: float = 11.0
    patch_bins: int = 21
    curve_bins: int = 15
    subdivisions: tuple[int, ...] = (3, 3, 3, 3, 3, 3)

    def bins(self, kind: str) -> int:
        return self.patch_bins if kind == "patches" else self.curve_bins


@dataclass(frozen=True)
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    landmark: LandmarkConfig = field(default_factory=LandmarkConfig)
    gabor: GaborConfig = field(default_factory=GaborConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    kfa: KFAParams = field(default_factory=KFAParams)
    ga: GAConfig = field(default_factory=GAConfig)


SECTIONS = tuple(f.name for f in fields(Config))


def _parse_value(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(_number(p)) for p in text.split(",") if p.strip())
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return int(text) if text.lstrip("+-").isdigit() else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(_number(text))
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def _number(text: str) -> float:
    """Float literal that also accepts ``pi`` multiples such as ``pi/3`` or ``-pi/4``."""
    t = text.strip().replace(" ", "")
    if "pi" not in t:
        return float(t)
    sign = -1.0 if t.startswith("-") else 1.0
    t = t.lstrip("+-")
    num, _, den = t.partition("/")
    coef = num.replace("pi", "").rstrip("*") or "1"
    return sign * float(coef) * math.pi / (float(den) if den else 1.0)


def parse_config(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    cfg = base or Config()
    updates: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown section in {key!r}")
        current = getattr(cfg, section)
        names = {f.name for f in fields(current)}
        if name not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = _parse_value(value, getattr(current, name), key)
    try:
        return replace(cfg, **{s: replace(getattr(cfg, s), **kv) for s, kv in updates.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    return value if isinstance(value, str) else repr(value)


def dump_config(cfg: Config) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_format(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
