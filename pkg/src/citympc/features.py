"""Model-ready conditioning features: image normalization and coordinate encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .render import (CH_DEPTH, CH_EPS, CH_NORMAL, CH_RGB, CH_SCATTER, CH_SIGMA,
                     CH_THICKNESS, CH_XPD, DEPTH_MAX_M, HeightMap, PovStack)

EPS_R_MAX = 25.0
SIGMA_MAX = 10.0
HEIGHT_MAX_M = 500.0


def _log_norm(values, vmax):
    return np.log1p(values) / math.log1p(vmax)


def preprocess_pov(raw: PovStack) -> np.ndarray:
    """Normalize a raw 12-channel POV stack; everything but normals lands in [0, 1]."""
    d = raw.data
    checks = [
        ("rgb", d[CH_RGB], 0.0, 255.0),
        ("depth", d[CH_DEPTH], 0.0, DEPTH_MAX_M),
        ("normals", d[CH_NORMAL], -1.0, 1.0),
        ("eps_r", d[CH_EPS], 1.0, EPS_R_MAX),
        ("sigma", d[CH_SIGMA], 0.0, SIGMA_MAX),
        ("scatter", d[CH_SCATTER], 0.0, 1.0),
        ("xpd", d[CH_XPD], 0.0, 1.0),
        ("thickness", d[CH_THICKNESS], 0.0, 1.0),
    ]
    for name, vals, lo, hi in checks:
        if np.any(vals < lo - 1e-9) or np.any(vals > hi + 1e-9):
            raise ConfigError(f"POV channel {name!r} outside [{lo}, {hi}]")
    out = np.empty_like(d)
    out[CH_RGB] = d[CH_RGB] / 255.0
    out[CH_DEPTH] = _log_norm(d[CH_DEPTH], DEPTH_MAX_M)
    out[CH_NORMAL] = d[CH_NORMAL]
    out[CH_EPS] = _log_norm(d[CH_EPS], EPS_R_MAX)
    out[CH_SIGMA] = _log_norm(d[CH_SIGMA], SIGMA_MAX)
    out[CH_SCATTER] = d[CH_SCATTER]
    out[CH_XPD] = d[CH_XPD]
    out[CH_THICKNESS] = d[CH_THICKNESS]
    return out


def preprocess_heightmap(raw: HeightMap) -> np.ndarray:
    """log(1+h)/log(1+500); monotone in h, 0 at ground, 1 at h_max."""
    if np.any(raw.data < 0):
        raise ConfigError("heightmap has negative heights")
    return _log_norm(raw.data, HEIGHT_MAX_M)


@dataclass(frozen=True)
class FourierEncoding:
    """Octave-spaced sinusoidal coordinate features: f_b = 2^b cycles per scale."""

    n_bands: int = 8
    coordinate_scale_m: float = 1000.0

    @property
    def dims_per_scalar(self) -> int:
        return 2 * self.n_bands

    def frequencies(self) -> np.ndarray:
        return 2.0 ** np.arange(self.n_bands)

    def encode(self, scalars) -> np.ndarray:
        """Concatenated [sin, cos] per band per scalar, scalar-major order."""
        s = np.asarray(scalars, dtype=np.float64).ravel()
        phase = 2.0 * math.pi * self.frequencies()[None, :] * s[:, None] / self.coordinate_scale_m
        per_scalar = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (n, bands, 2)
        return per_scalar.reshape(-1)


def fourier_encode(coords6, encoding: FourierEncoding = FourierEncoding()) -> np.ndarray:
    """Encode the raw 6-vector of TX/RX coordinates into 96 dims."""
    c = np.asarray(coords6, dtype=np.float64).ravel()
    if c.shape[0] != 6:
        raise ConfigError(f"expected 6 coordinate scalars, got {c.shape[0]}")
    return encoding.encode(c)
