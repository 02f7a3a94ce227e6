"""Procedural urban scene generation.

Buildings are axis-aligned boxes placed on a jittered Manhattan grid inside a
square footprint.  Generation is fully deterministic for a given seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError
from .materials import MATERIALS

DEFAULT_EXTENT_M = 512.0
DEFAULT_CARRIER_HZ = 3.5e9


@dataclass(frozen=True)
class Building:
    """Axis-aligned box footprint [xmin, xmax] x [ymin, ymax], height above ground."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height_m: float
    material: str = "concrete"

    def __post_init__(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ConfigError("building footprint has non-positive area")
        if self.height_m <= 0:
            raise ConfigError("building height must be > 0")
        if self.material not in MATERIALS:
            raise ConfigError(f"unknown material {self.material!r}")

    def overlaps(self, other: "Building") -> bool:
        return not (self.xmax <= other.xmin or other.xmax <= self.xmin
                    or self.ymax <= other.ymin or other.ymax <= self.ymin)

    def contains_xy(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    @property
    def center(self):
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))


@dataclass(frozen=True)
class SceneConfig:
    """Generation knobs; serialized as JSON for provenance."""

    n_buildings: int = 10
    extent_m: float = DEFAULT_EXTENT_M
    height_range_m: tuple = (10.0, 60.0)
    footprint_range_m: tuple = (20.0, 60.0)
    material_mix: tuple = ("concrete", "concrete", "wood", "glass")
    carrier_hz: float = DEFAULT_CARRIER_HZ
    grid_margin_m: float = 20.0
    max_retries: int = 200

    def validate(self):
        if self.n_buildings < 1:
            raise ConfigError("n_buildings must be >= 1")
        if self.extent_m <= 0:
            raise ConfigError("extent_m must be > 0")
        lo, hi = self.height_range_m
        if not 0 < lo <= hi:
            raise ConfigError("height_range_m must be positive and ordered")
        lo, hi = self.footprint_range_m
        if not 0 < lo <= hi:
            raise ConfigError("footprint_range_m must be positive and ordered")
        for m in self.material_mix:
            if m not in MATERIALS:
                raise ConfigError(f"unknown material {m!r} in material_mix")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceneConfig":
        raw = json.loads(text)
        for key in ("height_range_m", "footprint_range_m", "material_mix"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return SceneConfig(**raw)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass(frozen=True)
class UrbanScene:
    extent_m: float
    buildings: tuple
    ground: str
    carrier_hz: float
    seed: int

    def __post_init__(self):
        for b in self.buildings:
            if b.xmin < 0 or b.ymin < 0 or b.xmax > self.extent_m or b.ymax > self.extent_m:
                raise ConfigError("building outside scene extent")
        for i, a in enumerate(self.buildings):
            for b in self.buildings[i + 1:]:
                if a.overlaps(b):
                    raise ConfigError("overlapping building footprints")

    def building_at_xy(self, x: float, y: float):
        for b in self.buildings:
            if b.contains_xy(x, y):
                return b
        return None


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> UrbanScene:
    """Place config.n_buildings boxes on a jittered Manhattan grid.

    Cells are visited in a seed-shuffled order; a building whose jittered
    footprint would overlap an earlier one is re-sampled up to
    config.max_retries times before the placement fails.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5CE2E]))

    fp_lo, fp_hi = config.footprint_range_m
    usable = config.extent_m - 2 * config.grid_margin_m
    if usable <= fp_hi:
        raise ConfigError("scene extent too small for the requested footprints")
    cell = fp_hi * 1.6
    n_cells = max(1, int(usable // cell))
    if n_cells * n_cells < config.n_buildings:
        raise ConfigError(
            f"grid of {n_cells * n_cells} cells cannot host {config.n_buildings} buildings")

    cells = [(i, j) for i in range(n_cells) for j in range(n_cells)]
    rng.shuffle(cells)

    placed = []
    for (ci, cj) in cells[:config.n_buildings]:
        ok = False
        for _ in range(config.max_retries):
            w = rng.uniform(fp_lo, fp_hi)
            d = rng.uniform(fp_lo, fp_hi)
            cx = config.grid_margin_m + (ci + 0.5) * (usable / n_cells)
            cy = config.grid_margin_m + (cj + 0.5) * (usable / n_cells)
            jitter = 0.5 * (usable / n_cells - max(w, d))
            if jitter > 0:
                cx += rng.uniform(-jitter, jitter)
                cy += rng.uniform(-jitter, jitter)
            b = Building(
                xmin=max(0.0, cx - w / 2), ymin=max(0.0, cy - d / 2),
                xmax=min(config.extent_m, cx + w / 2), ymax=min(config.extent_m, cy + d / 2),
                height_m=rng.uniform(*config.height_range_m),
                material=str(rng.choice(list(config.material_mix))),
            )
            if all(not b.overlaps(p) for p in placed):
                placed.append(b)
                ok = True
                break
        if not ok:
            raise ConfigError(
                f"could not place building {len(placed) + 1} of {config.n_buildings} "
                f"after {config.max_retries} retries ({len(placed)} placed)")

    return UrbanScene(
        extent_m=config.extent_m,
        buildings=tuple(placed),
        ground="concrete",
        carrier_hz=config.carrier_hz,
        seed=int(seed),
    )
