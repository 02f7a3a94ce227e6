"""Evaluation metrics: presence F1, delay/power MAEs, power-weighted mean
angles, empirical CDFs, transfer matrices, and spatial power maps.

Per-link angle summaries: azimuth uses the power-weighted circular mean
(atan2 of the resultant, mapped to [0, 360)), elevation a plain power-weighted
arithmetic mean.  Azimuth differences default to circular distance
min(d, 360 - d); linear_az_diff switches to the literal absolute difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import LinkChannel
from .errors import ConfigError, DegenerateLinkError

AZIMUTH_AMBIGUITY_EPS = 1e-12

METRIC_NAMES = ("presence_f1", "tof_mae_ns", "mean_delay_mae_ns", "rx_power_mae_db",
                "aod_az_mae_deg", "aod_el_mae_deg", "aoa_az_mae_deg", "aoa_el_mae_deg")

_ANGLE_FIELDS = {
    "aod_az": ("aod_az_rad", True),
    "aod_el": ("aod_el_rad", False),
    "aoa_az": ("aoa_az_rad", True),
    "aoa_el": ("aoa_el_rad", False),
}


def presence_f1(true_masks, pred_masks) -> float:
    """Micro-averaged F1 over all slots of all links; 0 when P + R degenerates."""
    t = np.asarray(true_masks, dtype=bool)
    p = np.asarray(pred_masks, dtype=bool)
    if t.shape != p.shape:
        raise ConfigError(f"mask shapes differ: {t.shape} vs {p.shape}")
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def weighted_mean_delay(link: LinkChannel) -> float:
    """Power-weighted mean absolute delay, seconds."""
    active = link.active_paths()
    if not active:
        raise DegenerateLinkError("no active paths")
    w = np.array([p.power for p in active])
    if w.sum() <= 0:
        raise DegenerateLinkError("zero total power")
    tau = np.array([p.delay_s for p in active])
    return float(np.sum(w * tau) / np.sum(w))


def weighted_mean_angle(link: LinkChannel, which: str):
    """Power-weighted mean angle in degrees.

    Returns (angle_deg, ambiguous).  Azimuths use the circular mean of the
    power-weighted resultant, mapped to [0, 360); a resultant shorter than
    AZIMUTH_AMBIGUITY_EPS falls back to 0 with the flag set.  Elevations use
    the arithmetic mean.
    """
    if which not in _ANGLE_FIELDS:
        raise ConfigError(f"unknown angle selector {which!r}")
    field, circular = _ANGLE_FIELDS[which]
    active = link.active_paths()
    if not active:
        raise DegenerateLinkError("no active paths")
    w = np.array([p.power for p in active])
    if w.sum() <= 0:
        raise DegenerateLinkError("zero total power")
    ang = np.array([getattr(p, field) for p in active])
    if not circular:
        return float(np.degrees(np.sum(w * ang) / np.sum(w))), False
    c = float(np.sum(w * np.cos(ang)))
    s = float(np.sum(w * np.sin(ang)))
    if math.hypot(c, s) < AZIMUTH_AMBIGUITY_EPS * w.sum():
        return 0.0, True
    return math.degrees(math.atan2(s, c)) % 360.0, False


def _az_difference(a_deg: float, b_deg: float, linear: bool) -> float:
    d = abs(a_deg - b_deg)
    return d if linear else min(d, 360.0 - d)


@dataclass(frozen=True)
class LinkMetrics:
    tp: int
    fp: int
    fn: int
    tof_err_ns: float
    mean_delay_err_ns: float
    rx_power_err_db: float
    aod_az_err_deg: float
    aod_el_err_deg: float
    aoa_az_err_deg: float
    aoa_el_err_deg: float
    ambiguous: bool


def link_metrics(truth: LinkChannel, pred: LinkChannel,
                 linear_az_diff: bool = False) -> LinkMetrics:
    t_mask = np.array([p.present for p in truth.paths], dtype=bool)
    p_mask = np.array([p.present for p in pred.paths], dtype=bool)
    if t_mask.shape != p_mask.shape:
        raise ConfigError("links have different slot capacities")
    ambiguous = False
    angle_errs = {}
    for which, (_, circular) in _ANGLE_FIELDS.items():
        a, fa = weighted_mean_angle(truth, which)
        b, fb = weighted_mean_angle(pred, which)
        ambiguous = ambiguous or fa or fb
        angle_errs[which] = _az_difference(a, b, linear_az_diff) if circular \
            else abs(a - b)
    return LinkMetrics(
        tp=int(np.sum(t_mask & p_mask)),
        fp=int(np.sum(~t_mask & p_mask)),
        fn=int(np.sum(t_mask & ~p_mask)),
        tof_err_ns=abs(truth.tof_s - pred.tof_s) * 1e9,
        mean_delay_err_ns=abs(weighted_mean_delay(truth) - weighted_mean_delay(pred)) * 1e9,
        rx_power_err_db=abs(truth.rx_power_db - pred.rx_power_db),
        aod_az_err_deg=angle_errs["aod_az"],
        aod_el_err_deg=angle_errs["aod_el"],
        aoa_az_err_deg=angle_errs["aoa_az"],
        aoa_el_err_deg=angle_errs["aoa_el"],
        ambiguous=ambiguous,
    )


def evaluate(pairs, linear_az_diff: bool = False) -> dict:
    """Aggregate metrics over (truth, prediction) link pairs.

    Predictions of None (empty generative draws) contribute only false
    negatives to F1 and are excluded from the continuous MAEs; the returned
    table reports how many links that affected.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("evaluate needs at least one link pair")
    tp = fp = fn = 0
    rows = []
    empty = 0
    for truth, pred in pairs:
        if pred is None:
            empty += 1
            fn += truth.n_active
            continue
        lm = link_metrics(truth, pred, linear_az_diff)
        tp += lm.tp
        fp += lm.fp
        fn += lm.fn
        rows.append(lm)
    denom = 2 * tp + fp + fn
    out = {"presence_f1": 2.0 * tp / denom if denom else 0.0,
           "n_links": len(pairs), "n_empty_predictions": empty}
    fields = (("tof_mae_ns", "tof_err_ns"), ("mean_delay_mae_ns", "mean_delay_err_ns"),
              ("rx_power_mae_db", "rx_power_err_db"),
              ("aod_az_mae_deg", "aod_az_err_deg"), ("aod_el_mae_deg", "aod_el_err_deg"),
              ("aoa_az_mae_deg", "aoa_az_err_deg"), ("aoa_el_mae_deg", "aoa_el_err_deg"))
    for out_name, attr in fields:
        out[out_name] = float(np.mean([getattr(r, attr) for r in rows])) \
            if rows else float("nan")
    return out


def empirical_cdf(values, grid):
    """F(x) = fraction of values <= x, evaluated on the (sorted) grid."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ConfigError("empirical_cdf needs at least one value")
    g = np.asarray(grid, dtype=np.float64)
    f = np.searchsorted(v, g, side="right") / v.size
    return g, f


def transfer_matrix(eval_fn, models, datasets, metric: str) -> np.ndarray:
    """Grid of eval_fn(model, dataset)[metric] over models (rows) x datasets."""
    out = np.empty((len(models), len(datasets)))
    for i, m in enumerate(models):
        for j, d in enumerate(datasets):
            out[i, j] = eval_fn(m, d)[metric]
    return out
