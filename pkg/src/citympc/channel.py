"""Multipath channel data model and per-link normalization transforms.

A link is a fixed-capacity list of path slots, power-ordered with all active
slots first.  Normalization maps the raw physical quantities into the ranges
the model trains on: unit-power complex gains, windowed excess delays, unit
direction vectors, and z-scored log-ToF / received power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateLinkError

SPEED_OF_LIGHT = 299_792_458.0

DEFAULT_L = 25
DEFAULT_WINDOW_S = 1e-6
LOG_TOF_EPS = 1e-12

_POLE_SIN_EPS = 1e-12


@dataclass(frozen=True)
class MpcPath:
    """One propagation path slot; all-zero when inactive."""

    present: bool = False
    gain_re: float = 0.0
    gain_im: float = 0.0
    delay_s: float = 0.0
    aod_az_rad: float = 0.0
    aod_el_rad: float = 0.0
    aoa_az_rad: float = 0.0
    aoa_el_rad: float = 0.0

    def __post_init__(self):
        if self.present:
            if self.delay_s < 0:
                raise ConfigError(f"active path has negative delay {self.delay_s}")
            for el in (self.aod_el_rad, self.aoa_el_rad):
                if not 0.0 <= el <= math.pi:
                    raise ConfigError(f"elevation {el} outside [0, pi]")
            for az in (self.aod_az_rad, self.aoa_az_rad):
                if not -math.pi <= az < math.pi:
                    raise ConfigError(f"azimuth {az} outside [-pi, pi)")
        else:
            if any((self.gain_re, self.gain_im, self.delay_s, self.aod_az_rad,
                    self.aod_el_rad, self.aoa_az_rad, self.aoa_el_rad)):
                raise ConfigError("inactive path slot must be all-zero")

    @property
    def gain(self) -> complex:
        return complex(self.gain_re, self.gain_im)

    @property
    def power(self) -> float:
        return self.gain_re * self.gain_re + self.gain_im * self.gain_im


_ZERO_PATH = MpcPath()


@dataclass(frozen=True)
class LinkChannel:
    """One TX-RX link: up to L power-ordered path slots plus derived scalars."""

    paths: tuple
    tx_pos: tuple
    rx_pos: tuple
    tof_s: float
    rx_power_db: float

    @staticmethod
    def from_paths(active_paths, tx_pos, rx_pos, capacity: int = DEFAULT_L) -> "LinkChannel":
        """Sort active paths by descending power (ties: ascending delay, then
        construction order), pad with inactive slots, and derive tof/power."""
        active = [p for p in active_paths if p.present]
        if not active:
            raise DegenerateLinkError("link has no active paths")
        if len(active) > capacity:
            raise ConfigError(f"{len(active)} paths exceed capacity {capacity}")
        order = sorted(range(len(active)),
                       key=lambda i: (-active[i].power, active[i].delay_s, i))
        ordered = [active[i] for i in order]
        ordered.extend([_ZERO_PATH] * (capacity - len(ordered)))
        tof = min(p.delay_s for p in active)
        p_tot = sum(p.power for p in active)
        if p_tot <= 0.0:
            raise DegenerateLinkError("link has zero total power")
        return LinkChannel(
            paths=tuple(ordered),
            tx_pos=tuple(float(v) for v in tx_pos),
            rx_pos=tuple(float(v) for v in rx_pos),
            tof_s=tof,
            rx_power_db=10.0 * math.log10(p_tot),
        )

    @property
    def capacity(self) -> int:
        return len(self.paths)

    def active_paths(self):
        return [p for p in self.paths if p.present]

    @property
    def n_active(self) -> int:
        return sum(1 for p in self.paths if p.present)


@dataclass(frozen=True)
class NormStats:
    """Training-split statistics driving the link-level z-score transforms."""

    mu_log: float
    sigma_log: float
    mu_rx: float
    sigma_rx: float
    window_s: float = DEFAULT_WINDOW_S

    def __post_init__(self):
        if self.sigma_log <= 0 or self.sigma_rx <= 0 or self.window_s <= 0:
            raise ConfigError("NormStats requires sigma_log, sigma_rx, window_s > 0")


@dataclass(frozen=True)
class NormalizedLink:
    """Model-space view of one link.

    Per-slot arrays are length-L with zeros in inactive slots; the gain rows of
    active slots carry unit total power and the earliest active slot has excess
    delay zero.
    """

    present: np.ndarray        # (L,) float 0/1
    gain_n: np.ndarray         # (L, 2) re/im of normalized gain
    excess_delay_n: np.ndarray # (L,) in [0, 1]
    aod_unit: np.ndarray       # (L, 3)
    aoa_unit: np.ndarray       # (L, 3)
    tof_n: float
    rx_power_n: float

    @property
    def capacity(self) -> int:
        return int(self.present.shape[0])

    def slot_matrix(self) -> np.ndarray:
        """Stack the per-slot payload as (L, 10): [re, im, tau, aod(3), aoa(3), m]."""
        return np.concatenate(
            [self.gain_n,
             self.excess_delay_n[:, None],
             self.aod_unit,
             self.aoa_unit,
             self.present[:, None]],
            axis=1,
        )


def received_power_db(link: LinkChannel) -> float:
    """Recompute P_rx = 10*log10(sum of active squared gains)."""
    active = link.active_paths()
    if not active:
        raise DegenerateLinkError("no active paths")
    return 10.0 * math.log10(sum(p.power for p in active))


def tof(link: LinkChannel) -> float:
    """Recompute the time of flight (minimum active delay, seconds)."""
    active = link.active_paths()
    if not active:
        raise DegenerateLinkError("no active paths")
    return min(p.delay_s for p in active)


def normalize_gains(link: LinkChannel):
    """Return (gains_n, p_tot) with gains_n (L, 2) scaled so active power sums to 1."""
    present = np.array([p.present for p in link.paths], dtype=bool)
    gains = np.array([[p.gain_re, p.gain_im] for p in link.paths], dtype=np.float64)
    p_tot = float(np.sum(gains[present] ** 2))
    if p_tot <= 0.0:
        raise DegenerateLinkError("zero total power in normalize_gains")
    out = np.zeros_like(gains)
    out[present] = gains[present] / math.sqrt(p_tot)
    return out, p_tot


def normalize_delays(link: LinkChannel, window_s: float = DEFAULT_WINDOW_S) -> np.ndarray:
    """Per-slot excess delays clip((tau - tau0)/W, 0, 1); inactive slots are zero."""
    if window_s <= 0:
        raise ConfigError("window_s must be > 0")
    active = link.active_paths()
    if not active:
        raise DegenerateLinkError("no active paths")
    tau0 = min(p.delay_s for p in active)
    out = np.zeros(link.capacity, dtype=np.float64)
    for i, p in enumerate(link.paths):
        if p.present:
            out[i] = min(max((p.delay_s - tau0) / window_s, 0.0), 1.0)
    return out


def encode_direction(az_rad: float, el_rad: float) -> np.ndarray:
    """Spherical angles to a unit 3-vector (az from +x in the xy plane, el from +z)."""
    se = math.sin(el_rad)
    return np.array([se * math.cos(az_rad), se * math.sin(az_rad), math.cos(el_rad)])


def decode_direction(vec) -> tuple:
    """Unit 3-vector back to (az, el); azimuth canonicalized to 0 at the poles
    and to -pi on the wrap boundary."""
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < 1e-9:
        raise ConfigError("cannot decode a near-zero direction vector")
    v = v / norm
    el = math.acos(min(1.0, max(-1.0, v[2])))
    if abs(math.sin(el)) < _POLE_SIN_EPS:
        return 0.0, el
    az = math.atan2(v[1], v[0])
    if az >= math.pi:  # canonical range [-pi, pi)
        az = -math.pi
    return az, el


def normalize_tof(tof_s: float, stats: NormStats) -> float:
    if tof_s <= 0:
        raise DegenerateLinkError(f"non-positive ToF {tof_s}")
    tof_ns = tof_s * 1e9
    return (math.log(tof_ns + LOG_TOF_EPS) - stats.mu_log) / stats.sigma_log


def denormalize_tof(tof_n: float, stats: NormStats) -> float:
    tof_ns = math.exp(tof_n * stats.sigma_log + stats.mu_log) - LOG_TOF_EPS
    return tof_ns * 1e-9


def normalize_rx_power(p_db: float, stats: NormStats) -> float:
    return (p_db - stats.mu_rx) / stats.sigma_rx


def denormalize_rx_power(p_n: float, stats: NormStats) -> float:
    return p_n * stats.sigma_rx + stats.mu_rx


def normalize_link(link: LinkChannel, stats: NormStats) -> NormalizedLink:
    """Apply every per-link transform, producing the model-space payload."""
    gains_n, _ = normalize_gains(link)
    delays_n = normalize_delays(link, stats.window_s)
    L = link.capacity
    aod = np.zeros((L, 3))
    aoa = np.zeros((L, 3))
    present = np.zeros(L)
    for i, p in enumerate(link.paths):
        if p.present:
            present[i] = 1.0
            aod[i] = encode_direction(p.aod_az_rad, p.aod_el_rad)
            aoa[i] = encode_direction(p.aoa_az_rad, p.aoa_el_rad)
    return NormalizedLink(
        present=present,
        gain_n=gains_n,
        excess_delay_n=delays_n,
        aod_unit=aod,
        aoa_unit=aoa,
        tof_n=normalize_tof(link.tof_s, stats),
        rx_power_n=normalize_rx_power(link.rx_power_db, stats),
    )


def denormalize_link(nl: NormalizedLink, stats: NormStats, tx_pos=(0.0, 0.0, 0.0),
                     rx_pos=(0.0, 0.0, 0.0)) -> LinkChannel:
    """Invert normalize_link using the stored link-level scalars."""
    tof_s = denormalize_tof(nl.tof_n, stats)
    p_rx_db = denormalize_rx_power(nl.rx_power_n, stats)
    scale = math.sqrt(10.0 ** (p_rx_db / 10.0))
    paths = []
    for i in range(nl.capacity):
        if nl.present[i] <= 0.5:
            continue
        aod_az, aod_el = decode_direction(nl.aod_unit[i])
        aoa_az, aoa_el = decode_direction(nl.aoa_unit[i])
        paths.append(MpcPath(
            present=True,
            gain_re=float(nl.gain_n[i, 0]) * scale,
            gain_im=float(nl.gain_n[i, 1]) * scale,
            delay_s=tof_s + float(nl.excess_delay_n[i]) * stats.window_s,
            aod_az_rad=aod_az, aod_el_rad=aod_el,
            aoa_az_rad=aoa_az, aoa_el_rad=aoa_el,
        ))
    return LinkChannel.from_paths(paths, tx_pos, rx_pos, capacity=nl.capacity)


def synthesize_cir(link: LinkChannel, n_taps: int, tap_spacing_s: float):
    """Bin path gains into a discrete impulse response.

    Paths map to tap round(delay / spacing); contributions in the same bin sum
    coherently.  Delays past the last tap accumulate into the final tap and set
    the overflow flag.  Returns (|h| per tap, overflow).
    """
    if n_taps < 1:
        raise ConfigError("n_taps must be >= 1")
    taps = np.zeros(n_taps, dtype=np.complex128)
    overflow = False
    for p in link.active_paths():
        idx = int(round(p.delay_s / tap_spacing_s))
        if idx >= n_taps:
            idx = n_taps - 1
            overflow = True
        taps[idx] += p.gain
    return np.abs(taps), overflow
