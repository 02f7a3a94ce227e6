"""Low-resolution conditioning imagery: POV stacks and global heightmaps.

The POV renderer is a pinhole ray caster over the scene's axis-aligned boxes
and the ground plane.  Each pixel carries 12 channels: RGB, depth, geometric
normal, and the five EM properties of the intersected material.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .materials import GROUND_RGB, MATERIAL_RGB, MATERIALS
from .scene import UrbanScene

POV_CHANNELS = 12
POV_FOV_RAD = math.radians(45.0)
DEPTH_MAX_M = 500.0
DEFAULT_POV_RESOLUTION = 16
DEFAULT_HEIGHTMAP_RESOLUTION = 128

# channel layout indices
CH_RGB = slice(0, 3)
CH_DEPTH = 3
CH_NORMAL = slice(4, 7)
CH_EPS = 7
CH_SIGMA = 8
CH_SCATTER = 9
CH_XPD = 10
CH_THICKNESS = 11


@dataclass(frozen=True)
class PovStack:
    data: np.ndarray  # (12, res, res)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != POV_CHANNELS:
            raise ConfigError(f"POV stack must be (12, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("POV stack contains non-finite values")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class HeightMap:
    data: np.ndarray  # (res, res), meters
    meters_per_pixel: float

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ConfigError("heightmap must be 2-D")
        if np.any(self.data < 0):
            raise ConfigError("heightmap has negative heights")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[0])

    @property
    def extent_m(self) -> float:
        return self.resolution * self.meters_per_pixel


def _camera_rays(from_pos, toward_pos, resolution):
    origin = np.asarray(from_pos, dtype=np.float64)
    target = np.asarray(toward_pos, dtype=np.float64)
    fwd = target - origin
    n = np.linalg.norm(fwd)
    if n < 1e-9:
        raise ConfigError("camera position and target coincide")
    fwd = fwd / n
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(fwd, world_up)) > 1.0 - 1e-9:
        world_up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    half = math.tan(POV_FOV_RAD / 2.0)
    px = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    ndc_x, ndc_y = np.meshgrid(px, -px, indexing="xy")  # rows top-down
    dirs = (fwd[None, None, :]
            + ndc_x[..., None] * half * right[None, None, :]
            + ndc_y[..., None] * half * up[None, None, :])
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origin, dirs


def _ray_boxes(origin, dirs, boxes):
    """Nearest box hit per ray: (t, box index, entry axis); inf/-1 on miss."""
    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_box = np.full(n_rays, -1, dtype=np.int64)
    best_axis = np.zeros(n_rays, dtype=np.int64)
    for bi, box in enumerate(boxes):
        lo, hi = box[:3], box[3:]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo[None, :] - origin[None, :]) / dirs
            t_hi = (hi[None, :] - origin[None, :]) / dirs
        t1 = np.minimum(t_lo, t_hi)
        t2 = np.maximum(t_lo, t_hi)
        par = np.abs(dirs) < 1e-15
        inside = (origin >= lo - 1e-12) & (origin <= hi + 1e-12)
        t1 = np.where(par, np.where(inside[None, :], -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside[None, :], np.inf, -np.inf), t2)
        tmin = np.max(t1, axis=1)
        tmax = np.min(t2, axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-9) & (tmin < best_t)
        t_enter = np.where(tmin > 1e-9, tmin, tmax)
        hit &= t_enter < best_t
        axis = np.argmax(t1, axis=1)
        best_t = np.where(hit, t_enter, best_t)
        best_box = np.where(hit, bi, best_box)
        best_axis = np.where(hit, axis, best_axis)
    return best_t, best_box, best_axis


def render_pov(scene: UrbanScene, from_pos, toward_pos,
               resolution: int = DEFAULT_POV_RESOLUTION) -> PovStack:
    """Ray-cast one 12-channel POV stack from `from_pos` looking at `toward_pos`."""
    origin, dirs = _camera_rays(from_pos, toward_pos, resolution)
    n_rays = dirs.shape[0]
    boxes = np.array([[b.xmin, b.ymin, 0.0, b.xmax, b.ymax, b.height_m]
                      for b in scene.buildings]).reshape(-1, 6)
    t_box, idx_box, axis_box = _ray_boxes(origin, dirs, boxes)

    # ground plane z = 0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < -1e-12, -origin[2] / dz, np.inf)

    stack = np.zeros((POV_CHANNELS, n_rays))
    sky_rgb = np.array(MATERIAL_RGB["sky"], dtype=np.float64)
    stack[CH_RGB] = sky_rgb[:, None]
    stack[CH_DEPTH] = DEPTH_MAX_M
    stack[CH_EPS] = 1.0

    hit_box = (t_box < t_ground) & np.isfinite(t_box)
    hit_ground = np.isfinite(t_ground) & ~hit_box

    if np.any(hit_ground):
        tg = t_ground[hit_ground]
        stack[CH_DEPTH][hit_ground] = np.minimum(tg, DEPTH_MAX_M)
        stack[CH_NORMAL, :][2][hit_ground] = 1.0
        ground = MATERIALS[scene.ground]
        stack[CH_RGB, :][:, hit_ground] = np.array(GROUND_RGB, dtype=np.float64)[:, None]
        stack[CH_EPS][hit_ground] = ground.eps_r
        stack[CH_SIGMA][hit_ground] = ground.sigma_s_per_m
        stack[CH_SCATTER][hit_ground] = ground.scatter_s
        stack[CH_XPD][hit_ground] = ground.xpd_kx
        stack[CH_THICKNESS][hit_ground] = ground.thickness_m

    for bi, b in enumerate(scene.buildings):
        sel = hit_box & (idx_box == bi)
        if not np.any(sel):
            continue
        mat = MATERIALS[b.material]
        stack[CH_DEPTH][sel] = np.minimum(t_box[sel], DEPTH_MAX_M)
        rgb = np.array(MATERIAL_RGB[b.material], dtype=np.float64)
        stack[CH_RGB, :][:, sel] = rgb[:, None]
        for axis in range(3):
            a_sel = sel & (axis_box == axis)
            if np.any(a_sel):
                stack[CH_NORMAL, :][axis][a_sel] = -np.sign(dirs[a_sel, axis])
        stack[CH_EPS][sel] = mat.eps_r
        stack[CH_SIGMA][sel] = mat.sigma_s_per_m
        stack[CH_SCATTER][sel] = mat.scatter_s
        stack[CH_XPD][sel] = mat.xpd_kx
        stack[CH_THICKNESS][sel] = mat.thickness_m

    return PovStack(data=stack.reshape(POV_CHANNELS, resolution, resolution))


def render_heightmap(scene: UrbanScene,
                     resolution: int = DEFAULT_HEIGHTMAP_RESOLUTION) -> HeightMap:
    """Top-down orthographic max-height per pixel; ground pixels are zero."""
    mpp = scene.extent_m / resolution
    xs = (np.arange(resolution) + 0.5) * mpp
    ys = (np.arange(resolution) + 0.5) * mpp
    gx, gy = np.meshgrid(xs, ys, indexing="xy")  # rows vary in y
    heights = np.zeros((resolution, resolution))
    for b in scene.buildings:
        mask = (gx >= b.xmin) & (gx <= b.xmax) & (gy >= b.ymin) & (gy <= b.ymax)
        heights = np.where(mask, np.maximum(heights, b.height_m), heights)
    return HeightMap(data=heights, meters_per_pixel=mpp)
