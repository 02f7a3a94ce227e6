"""End-to-end dataset construction: scene -> traced links -> splits -> records.

TX sites sit on rooftop masts (one endpoint region per site); RX points form
a ground-level grid, bucketed into square blocks that act as the RX endpoint
regions.  Every TX-RX pair is traced; links below the power floor vanish, the
split plan drops off-diagonal region pairs, and the survivors are normalized
with train-split statistics and serialized with their POV imagery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import DEFAULT_L, DEFAULT_WINDOW_S, normalize_link
from .datafile import Dataset, DatasetRecord
from .errors import ConfigError
from .features import preprocess_heightmap, preprocess_pov
from .render import render_heightmap, render_pov
from .scene import SceneConfig, UrbanScene, generate_scene
from .splits import DROPPED, assign_splits, compute_stats
from .tracer import LinkGeometry, TraceConfig, trace_link

# sub-stream tags for the dataset-level RNG
STREAM_TX_PICK = 0x7C5E1
STREAM_SPLIT = 0x59137


@dataclass(frozen=True)
class BuildConfig:
    n_tx: int = 6
    tx_mast_m: float = 3.0
    rx_pitch_m: float = 8.0
    rx_height_m: float = 1.5
    rx_blocks_per_side: int = 6
    pov_resolution: int = 16
    heightmap_resolution: int = 128
    capacity: int = DEFAULT_L
    window_s: float = DEFAULT_WINDOW_S
    trace: TraceConfig = field(default_factory=TraceConfig)

    def validate(self):
        if self.n_tx < 3:
            raise ConfigError("need at least 3 TX sites for the three splits")
        if self.rx_blocks_per_side < 2:
            raise ConfigError("need at least 2 RX blocks per side")
        for name in ("rx_pitch_m", "rx_height_m", "pov_resolution",
                     "heightmap_resolution", "capacity", "window_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.trace.l_max != self.capacity:
            raise ConfigError("trace.l_max must equal the dataset capacity")


def select_tx_sites(scene: UrbanScene, cfg: BuildConfig, rng):
    """One rooftop mast per chosen building, tallest-first for coverage."""
    if len(scene.buildings) < cfg.n_tx:
        raise ConfigError(
            f"scene has {len(scene.buildings)} buildings, need {cfg.n_tx} TX sites")
    order = sorted(range(len(scene.buildings)),
                   key=lambda i: -scene.buildings[i].height_m)
    picks = order[:cfg.n_tx]
    rng.shuffle(picks)
    sites = []
    for b_idx in picks:
        b = scene.buildings[b_idx]
        cx, cy = b.center
        sites.append((cx, cy, b.height_m + cfg.tx_mast_m))
    return sites


def rx_grid_points(scene: UrbanScene, cfg: BuildConfig):
    """Ground grid at the RX height, skipping points inside any footprint.

    Returns a list of ((x, y, z), block_region) tuples.
    """
    n = int(scene.extent_m // cfg.rx_pitch_m)
    if n < 2:
        raise ConfigError("rx_pitch_m too large for the scene extent")
    offset = 0.5 * (scene.extent_m - (n - 1) * cfg.rx_pitch_m)
    block = scene.extent_m / cfg.rx_blocks_per_side
    points = []
    for iy in range(n):
        for ix in range(n):
            x = offset + ix * cfg.rx_pitch_m
            y = offset + iy * cfg.rx_pitch_m
            if scene.building_at_xy(x, y) is not None:
                continue
            bx = min(int(x // block), cfg.rx_blocks_per_side - 1)
            by = min(int(y // block), cfg.rx_blocks_per_side - 1)
            points.append(((x, y, cfg.rx_height_m),
                           by * cfg.rx_blocks_per_side + bx))
    if not points:
        raise ConfigError("no RX grid points outside building footprints")
    return points


def build_dataset(scene_seed: int, scene_cfg: SceneConfig, build_cfg: BuildConfig,
                  split_seed: int):
    """Returns (Dataset, report dict)."""
    build_cfg.validate()
    scene = generate_scene(scene_seed, scene_cfg)
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(split_seed) & (2**64 - 1), STREAM_TX_PICK]))
    tx_sites = select_tx_sites(scene, build_cfg, rng)
    rx_points = rx_grid_points(scene, build_cfg)

    traced = []
    for t_idx, tx in enumerate(tx_sites):
        for rx, rx_region in rx_points:
            link = trace_link(scene, LinkGeometry(tx_pos=tx, rx_pos=rx),
                              build_cfg.trace)
            if link is None:
                continue
            if link.rx_power_db < build_cfg.trace.floor_db:
                continue
            traced.append((link, t_idx, rx_region))

    if len(traced) < 10:
        raise ConfigError(f"only {len(traced)} links survived tracing")
    n_rx_regions = build_cfg.rx_blocks_per_side ** 2
    plan, tags = assign_splits([(t, r) for _, t, r in traced],
                               len(tx_sites), n_rx_regions, split_seed)
    kept = [(link, t, r, tag) for (link, t, r), tag in zip(traced, tags)
            if tag != DROPPED]
    train_links = [link for link, _, _, tag in kept if tag == 0]
    stats = compute_stats(train_links, build_cfg.window_s)

    heightmap = preprocess_heightmap(
        render_heightmap(scene, build_cfg.heightmap_resolution))

    records = []
    for link_id, (link, t_idx, rx_region, tag) in enumerate(kept):
        tx_pov = preprocess_pov(render_pov(scene, link.tx_pos, link.rx_pos,
                                           build_cfg.pov_resolution))
        rx_pov = preprocess_pov(render_pov(scene, link.rx_pos, link.tx_pos,
                                           build_cfg.pov_resolution))
        records.append(DatasetRecord(
            link_id=link_id, split=tag, tx_region=t_idx, rx_region=rx_region,
            tx_pos=link.tx_pos, rx_pos=link.rx_pos,
            payload=normalize_link(link, stats),
            tx_pov=tx_pov.astype(np.float32), rx_pov=rx_pov.astype(np.float32)))

    dataset = Dataset(
        stats=stats, plan=plan, scene_seed=int(scene_seed),
        config_digest=scene_cfg.digest(),
        heightmap=heightmap.astype(np.float32),
        heightmap_mpp=scene.extent_m / build_cfg.heightmap_resolution,
        capacity=build_cfg.capacity, pov_resolution=build_cfg.pov_resolution,
        records=tuple(records))
    report = {
        "n_buildings": len(scene.buildings),
        "n_tx_sites": len(tx_sites),
        "n_rx_points": len(rx_points),
        "n_traced": len(traced),
        "n_records": len(records),
        "split_counts": [sum(1 for r in records if r.split == s) for s in range(3)],
        "split_fractions": list(plan.fractions),
    }
    return dataset, report
