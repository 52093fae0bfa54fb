"""Flat ``key = value`` configuration.

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
Defaults reproduce the published hyperparameters (120 x 120 descriptor at
0.3 m voxels, n=2, u=2, w=-0.15, k=10 deg, m=10, c=20, 2 m reference spacing)
plus the synthetic-benchmark settings used by ``mflpr synth``.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .descriptor import DescriptorParams
from .errors import ConfigError, MflprError
from .geometry import CropWindow


@dataclass(frozen=True)
class Config:
    # crop window and voxel size
    wx: float = 18.0
    wy: float = 18.0
    h1: float = 0.0
    h2: float = 4.0
    intensity_min: float = -math.inf
    vx: float = 0.3
    # descriptor
    d: int = 2
    w: float = -0.15
    m: int = 10
    c: int = 20
    u: int = 2
    rng_seed: int = 0
    # search
    k: float = 10.0
    n: int = 2
    spacing: float = 2.0
    # evaluation
    recall_threshold: float = 3.0
    sr_rte: float = 2.0
    sr_rre: float = 5.0
    score_uncorrected: bool = False
    # synthetic benchmark
    seed: int = 0
    n_ref_scans: int = 200
    ref_scan_spacing: float = 1.0
    n_queries: int = 50
    max_offset: float = 4.0
    yaw_step: float = 10.0
    lane_length: float = 100.0
    lane_gap: float = 40.0
    landmark_density: float = 0.015
    min_separation: float = 2.0
    path_clearance: float = 1.5
    point_density: float = 40.0
    max_range: float = 30.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    points_budget: int = 0
    scan_format: str = "bin"

    def __post_init__(self):
        try:
            self.window()
            self.descriptor_params()
        except MflprError as exc:
            raise ConfigError(str(exc)) from None
        if not self.vx > 0:
            raise ConfigError(f"vx must be positive, got {self.vx}")
        if not self.k > 0 or abs(360.0 / self.k - round(360.0 / self.k)) > 1e-9:
            raise ConfigError(f"k must divide 360, got {self.k}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.spacing < 0 or self.recall_threshold < 0:
            raise ConfigError("spacing and recall_threshold must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.noise_sigma < 0 or self.points_budget < 0:
            raise ConfigError("noise_sigma and points_budget must be non-negative")
        if self.scan_format not in ("bin", "txt"):
            raise ConfigError(f"scan_format must be 'bin' or 'txt', got {self.scan_format!r}")

    # -- derived objects ---------------------------------------------------
    def window(self) -> CropWindow:
        return CropWindow(self.wx, self.wy, self.h1, self.h2, self.intensity_min)

    def descriptor_params(self) -> DescriptorParams:
        return DescriptorParams(self.d, self.w, self.m, self.c, self.u, self.rng_seed)

    # -- parsing -------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, items: dict[str, str]) -> "Config":
        """Apply ``key -> raw string`` overrides (as read from a file or the command line)."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(key, raw, types[key])
        return dataclasses.replace(self, **parsed)

    @classmethod
    def from_text(cls, text: str, base: "Config | None" = None, source: str = "<config>") -> "Config":
        return (base or cls()).with_overrides(parse_kv(text, source))

    @classmethod
    def from_file(cls, path: str | os.PathLike, base: "Config | None" = None) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, base, str(path))

    @classmethod
    def preset(cls, name: str) -> "Config":
        try:
            text = resources.files("mflpr").joinpath("presets", f"{name}.cfg").read_text()
        except (FileNotFoundError, OSError):
            raise ConfigError(f"unknown preset {name!r}") from None
        return cls.from_text(text, source=f"preset:{name}")

    def canonical_text(self) -> str:
        """Every key, sorted, one ``key = value`` per line."""
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n"
                       for f in sorted(fields(self), key=lambda f: f.name))


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_value(key: str, raw: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key} ({typ}): {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
