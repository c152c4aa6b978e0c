"""Engine configuration: a flat TOML key-value file, CLI flags override file
values, unknown keys are rejected."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clustering import ClusterConfig
from .errors import ConfigError
from .fusion import ConsistencyConfig, FusionConfig


@dataclass
class EngineConfig:
    schema: str = "oem8"
    tile_size: int = 1024
    overlap_ratio: float = 0.5
    pixel_size_m: float = 0.3

    iou_match: float = 0.95
    iou_conflict_floor: float = 0.10
    min_fragment_px: int = 32

    eps: float = 0.15
    min_pts: int = 5
    purity_threshold: float = 0.90
    small_window: int = 3
    large_window: int = 5

    regions: int = 0  # 0 = ceil(#tiles / 400)
    n_per_region: int = 100
    seed: int = 0
    threads: int = 1
    auto_label: bool = False

    # input/output paths (pipeline)
    image: str = ""
    fine_masks: str = ""
    coarse_masks: str = ""
    reference: str = ""
    features: str = ""  # path to an MCFT file, or "" for handcrafted
    out_dir: str = ""

    def consistency(self) -> ConsistencyConfig:
        return ConsistencyConfig(self.iou_match, self.iou_conflict_floor)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.min_fragment_px)

    def cluster(self) -> ClusterConfig:
        return ClusterConfig(
            eps=self.eps,
            min_pts=self.min_pts,
            purity_threshold=self.purity_threshold,
            small_window=self.small_window,
            large_window=self.large_window,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path: Path | str | None, overrides: dict | None = None) -> EngineConfig:
    """Merge file values and CLI overrides over the defaults."""
    values: dict = {}
    known = {f.name: f.type for f in fields(EngineConfig)}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                parsed = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        unknown = set(parsed) - set(known)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(parsed)
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    try:
        cfg = EngineConfig(**values)
        # fail fast on out-of-range component values
        cfg.consistency()
        cfg.fusion()
        cfg.cluster()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
