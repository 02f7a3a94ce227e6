"""Image-method specular ray launcher.

Enumerates the line-of-sight path plus all specular reflection paths up to a
configurable order over building walls and the ground plane, with occlusion
testing against every building box.  The image method is exact for specular
paths on planar facets, so each returned path's delay is recomputable from
its stored reflection-point sequence.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .channel import SPEED_OF_LIGHT, DEFAULT_L, LinkChannel, MpcPath
from .errors import ConfigError
from .materials import MATERIALS, fresnel_reflection
from .scene import UrbanScene

_EPS = 1e-9


@dataclass(frozen=True)
class LinkGeometry:
    """TX on a rooftop mast, RX on the ground grid (1.5 m by default)."""

    tx_pos: tuple
    rx_pos: tuple


@dataclass(frozen=True)
class TraceConfig:
    max_reflections: int = 2
    l_max: int = DEFAULT_L
    prune_db: float = 25.0
    floor_db: float = -120.0


@dataclass(frozen=True)
class Surface:
    """Planar facet: plane {x[axis] = coord}, bounded in the other two axes."""

    axis: int
    coord: float
    normal_sign: float
    # bounds of the two in-plane axes, ordered by axis index
    lo0: float
    hi0: float
    lo1: float
    hi1: float
    material: str


@dataclass
class TracedPath:
    """One specular path with its interaction points kept for replay."""

    points: list            # [tx, refl_1, ..., refl_k, rx]
    surfaces: tuple         # surface indices, in order
    gain: complex
    delay_s: float
    aod_az: float
    aod_el: float
    aoa_az: float
    aoa_el: float

    @property
    def power(self) -> float:
        return abs(self.gain) ** 2


def scene_surfaces(scene: UrbanScene):
    """Ground plane plus the four vertical walls of every building."""
    surfaces = [Surface(axis=2, coord=0.0, normal_sign=1.0,
                        lo0=0.0, hi0=scene.extent_m, lo1=0.0, hi1=scene.extent_m,
                        material=scene.ground)]
    for b in scene.buildings:
        surfaces.append(Surface(0, b.xmin, -1.0, b.ymin, b.ymax, 0.0, b.height_m, b.material))
        surfaces.append(Surface(0, b.xmax, +1.0, b.ymin, b.ymax, 0.0, b.height_m, b.material))
        surfaces.append(Surface(1, b.ymin, -1.0, b.xmin, b.xmax, 0.0, b.height_m, b.material))
        surfaces.append(Surface(1, b.ymax, +1.0, b.xmin, b.xmax, 0.0, b.height_m, b.material))
    return surfaces


def _boxes_array(scene: UrbanScene) -> np.ndarray:
    if not scene.buildings:
        return np.zeros((0, 6))
    return np.array([[b.xmin, b.ymin, 0.0, b.xmax, b.ymax, b.height_m]
                     for b in scene.buildings])


def _segment_blocked(p, q, boxes: np.ndarray) -> bool:
    """Slab test of segment p->q against all boxes.

    A box blocks the segment when the parameter interval of the intersection
    has positive length inside (0, 1); touching a face at an endpoint (the
    reflection point itself) does not block.
    """
    if boxes.shape[0] == 0:
        return False
    d = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (boxes[:, :3] - p) / d
        t_hi = (boxes[:, 3:] - p) / d
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # axes where the segment is parallel to the slab
    par = np.abs(d) < 1e-15
    inside = (p >= boxes[:, :3] - 1e-12) & (p <= boxes[:, 3:] + 1e-12)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.max(t1, axis=1)
    tmax = np.min(t2, axis=1)
    enter = np.maximum(tmin, _EPS)
    leave = np.minimum(tmax, 1.0 - _EPS)
    return bool(np.any(leave - enter > 1e-9))


def _mirror(point: np.ndarray, surf: Surface) -> np.ndarray:
    out = point.copy()
    out[surf.axis] = 2.0 * surf.coord - out[surf.axis]
    return out


def _in_facet(point: np.ndarray, surf: Surface) -> bool:
    other = [a for a in range(3) if a != surf.axis]
    return (surf.lo0 - 1e-9 <= point[other[0]] <= surf.hi0 + 1e-9
            and surf.lo1 - 1e-9 <= point[other[1]] <= surf.hi1 + 1e-9)


def _direction_angles(d: np.ndarray):
    """(az, el) of a direction vector, az canonical in [-pi, pi)."""
    n = np.linalg.norm(d)
    u = d / n
    el = math.acos(min(1.0, max(-1.0, u[2])))
    if abs(math.sin(el)) < 1e-12:
        return 0.0, el
    az = math.atan2(u[1], u[0])
    if az >= math.pi:
        az = -math.pi
    return az, el


def _try_sequence(tx, rx, seq, surfaces, boxes, scene: UrbanScene):
    """Run the backward image walk for one surface sequence; None if invalid."""
    # forward chain of TX images
    images = [tx]
    for idx in seq:
        images.append(_mirror(images[-1], surfaces[idx]))
    # backward walk from RX
    points = [rx]
    cur = rx
    for i in range(len(seq) - 1, -1, -1):
        surf = surfaces[seq[i]]
        img = images[i + 1]
        denom = img[surf.axis] - cur[surf.axis]
        if abs(denom) < 1e-15:
            return None
        t = (surf.coord - cur[surf.axis]) / denom
        if not _EPS < t < 1.0 - _EPS:
            return None
        point = cur + t * (img - cur)
        if not _in_facet(point, surf):
            return None
        points.append(point)
        cur = point
    points.append(tx)
    points.reverse()  # [tx, p1, ..., pk, rx]

    # occlusion and incidence angles
    gamma = complex(1.0, 0.0)
    total_len = 0.0
    for i in range(len(points) - 1):
        a, b = points[i], points[i + 1]
        seg = b - a
        seg_len = float(np.linalg.norm(seg))
        if seg_len < 1e-9:
            return None
        total_len += seg_len
        if _segment_blocked(a, b, boxes):
            return None
        if i < len(seq):
            surf = surfaces[seq[i]]
            cos_i = abs(seg[surf.axis]) / seg_len
            theta = math.acos(min(1.0, max(0.0, cos_i)))
            if theta >= math.pi / 2 - 1e-12:
                return None
            gamma *= fresnel_reflection(MATERIALS[surf.material], theta, scene.carrier_hz)

    lam = SPEED_OF_LIGHT / scene.carrier_hz
    amp = lam / (4.0 * math.pi * total_len)
    gain = amp * gamma * cmath.exp(-2j * math.pi * total_len / lam)
    delay = total_len / SPEED_OF_LIGHT
    aod_az, aod_el = _direction_angles(points[1] - points[0])
    aoa_az, aoa_el = _direction_angles(points[-2] - points[-1])
    return TracedPath(points=[np.array(p) for p in points], surfaces=tuple(seq),
                      gain=gain, delay_s=delay,
                      aod_az=aod_az, aod_el=aod_el, aoa_az=aoa_az, aoa_el=aoa_el)


def enumerate_paths(scene: UrbanScene, geometry: LinkGeometry,
                    config: TraceConfig = TraceConfig()):
    """All valid specular paths up to config.max_reflections, unpruned."""
    tx = np.asarray(geometry.tx_pos, dtype=np.float64)
    rx = np.asarray(geometry.rx_pos, dtype=np.float64)
    for p in (tx, rx):
        if not (0 <= p[0] <= scene.extent_m and 0 <= p[1] <= scene.extent_m and p[2] >= 0):
            raise ConfigError("link endpoint outside scene")
    surfaces = scene_surfaces(scene)
    boxes = _boxes_array(scene)
    n = len(surfaces)

    paths = []
    # order 0: line of sight
    if not _segment_blocked(tx, rx, boxes) and float(np.linalg.norm(rx - tx)) > 1e-9:
        lam = SPEED_OF_LIGHT / scene.carrier_hz
        d = float(np.linalg.norm(rx - tx))
        gain = (lam / (4.0 * math.pi * d)) * cmath.exp(-2j * math.pi * d / lam)
        aod_az, aod_el = _direction_angles(rx - tx)
        aoa_az, aoa_el = _direction_angles(tx - rx)
        paths.append(TracedPath(points=[tx.copy(), rx.copy()], surfaces=(),
                                gain=gain, delay_s=d / SPEED_OF_LIGHT,
                                aod_az=aod_az, aod_el=aod_el,
                                aoa_az=aoa_az, aoa_el=aoa_el))

    # higher orders: ordered surface sequences without immediate repetition
    seqs = [(i,) for i in range(n)]
    for order in range(1, config.max_reflections + 1):
        for seq in seqs:
            path = _try_sequence(tx, rx, seq, surfaces, boxes, scene)
            if path is not None:
                paths.append(path)
        if order < config.max_reflections:
            seqs = [s + (j,) for s in seqs for j in range(n) if j != s[-1]]
    return paths


def prune_paths(paths, prune_db: float = 25.0):
    """Drop paths more than prune_db below the strongest (strict inequality)."""
    if not paths:
        raise ConfigError("prune_paths requires at least one path")
    p_max = max(p.power for p in paths)
    threshold = p_max * 10.0 ** (-prune_db / 10.0)
    # strictly "more than prune_db below": a gap of exactly prune_db is kept
    return [p for p in paths if p.power >= threshold * (1.0 - 1e-12)]


def filter_link(link, floor_db: float = -120.0) -> bool:
    """Keep a link only if total received power is at least floor_db (unit TX)."""
    if link is None or link.n_active == 0:
        return False
    return link.rx_power_db >= floor_db


def trace_link(scene: UrbanScene, geometry: LinkGeometry,
               config: TraceConfig = TraceConfig(), return_debug: bool = False):
    """Trace a link: enumerate, prune, power-order, and cap at l_max.

    Returns None when every path is blocked.  With return_debug=True, also
    returns the surviving TracedPath list (reflection points included).
    """
    traced = enumerate_paths(scene, geometry, config)
    if traced:
        traced = prune_paths(traced, config.prune_db)
        traced.sort(key=lambda p: (-p.power, p.delay_s))
        traced = traced[:config.l_max]
    if not traced:
        return (None, []) if return_debug else None
    mpc = [MpcPath(present=True, gain_re=p.gain.real, gain_im=p.gain.imag,
                   delay_s=p.delay_s, aod_az_rad=p.aod_az, aod_el_rad=p.aod_el,
                   aoa_az_rad=p.aoa_az, aoa_el_rad=p.aoa_el)
           for p in traced]
    link = LinkChannel.from_paths(mpc, geometry.tx_pos, geometry.rx_pos,
                                  capacity=config.l_max)
    return (link, traced) if return_debug else link
