"""Spatially disjoint split assignment and training-split statistics.

TX sites and RX grid blocks are each partitioned into three groups; a link is
kept only when its endpoints fall in matching groups (the diagonal pairing),
which guarantees no endpoint region is shared between splits.  Group sizes
are tuned by a deterministic local search so the kept-link fractions land
close to 70/15/15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import LOG_TOF_EPS, DEFAULT_WINDOW_S, NormStats
from .errors import ConfigError

SPLIT_NAMES = ("train", "val", "test")
TARGET_FRACTIONS = (0.70, 0.15, 0.15)
DROPPED = -1


@dataclass(frozen=True)
class SplitPlan:
    fractions: tuple
    tx_groups: tuple   # group index per TX region, aligned with tx_region ids 0..T-1
    rx_groups: tuple

    def split_of(self, tx_region: int, rx_region: int) -> int:
        """0/1/2 for train/val/test, DROPPED for off-diagonal region pairs."""
        g = self.tx_groups[tx_region]
        return g if g == self.rx_groups[rx_region] else DROPPED


def _kept_fractions(txg, rxg, counts):
    kept = np.zeros(3)
    for s in range(3):
        kept[s] = counts[np.ix_(txg == s, rxg == s)].sum()
    total = kept.sum()
    if total == 0:
        return np.zeros(3), 0.0
    return kept / total, total


def _objective(txg, rxg, counts):
    fracs, total = _kept_fractions(txg, rxg, counts)
    if total == 0:
        return np.inf
    return float(np.max(np.abs(fracs - np.array(TARGET_FRACTIONS))))


def _initial_groups(n: int, rng) -> np.ndarray:
    """sqrt-proportional partition: kept-link fractions of a diagonal pairing
    scale with the product of group fractions."""
    weights = np.sqrt(np.array(TARGET_FRACTIONS))
    weights /= weights.sum()
    sizes = np.floor(weights * n).astype(int)
    sizes = np.maximum(sizes, 1)
    while sizes.sum() < n:
        sizes[np.argmax(weights * n - sizes)] += 1
    while sizes.sum() > n:
        sizes[np.argmax(sizes)] -= 1
    groups = np.repeat(np.arange(3), sizes)
    rng.shuffle(groups)
    return groups


def assign_splits(link_regions, n_tx_regions: int, n_rx_regions: int,
                  plan_seed: int, max_iters: int = 200):
    """Partition regions and tag each link.

    link_regions: iterable of (tx_region, rx_region) per link.
    Returns (SplitPlan, tags) where tags[i] in {0, 1, 2, DROPPED}.
    """
    if n_tx_regions < 3 or n_rx_regions < 3:
        raise ConfigError("need at least 3 TX regions and 3 RX regions")
    pairs = [(int(t), int(r)) for t, r in link_regions]
    counts = np.zeros((n_tx_regions, n_rx_regions))
    for t, r in pairs:
        counts[t, r] += 1

    rng = np.random.default_rng(np.random.SeedSequence([int(plan_seed) & (2**64 - 1), 0x5B117]))
    txg = _initial_groups(n_tx_regions, rng)
    rxg = _initial_groups(n_rx_regions, rng)

    best = _objective(txg, rxg, counts)
    for _ in range(max_iters):
        improved = False
        for groups in (txg, rxg):
            for i in range(len(groups)):
                old = groups[i]
                if np.sum(groups == old) <= 1:
                    continue
                for new in range(3):
                    if new == old:
                        continue
                    groups[i] = new
                    obj = _objective(txg, rxg, counts)
                    if obj < best - 1e-12:
                        best = obj
                        old = new
                        improved = True
                    else:
                        groups[i] = old
        if not improved:
            break

    fracs, _ = _kept_fractions(txg, rxg, counts)
    plan = SplitPlan(fractions=tuple(float(f) for f in fracs),
                     tx_groups=tuple(int(g) for g in txg),
                     rx_groups=tuple(int(g) for g in rxg))
    tags = [plan.split_of(t, r) for t, r in pairs]
    return plan, tags


def compute_stats(train_links, window_s: float = DEFAULT_WINDOW_S) -> NormStats:
    """Unbiased mean/std of log-ToF (ns) and received power over the train split."""
    links = list(train_links)
    if len(links) < 2:
        raise ConfigError("compute_stats needs at least 2 training links")
    log_tof = np.array([math.log(l.tof_s * 1e9 + LOG_TOF_EPS) for l in links])
    p_rx = np.array([l.rx_power_db for l in links])
    sigma_log = float(np.std(log_tof, ddof=1))
    sigma_rx = float(np.std(p_rx, ddof=1))
    if sigma_log <= 0 or sigma_rx <= 0:
        raise ConfigError("degenerate training split: zero variance statistics")
    return NormStats(mu_log=float(np.mean(log_tof)), sigma_log=sigma_log,
                     mu_rx=float(np.mean(p_rx)), sigma_rx=sigma_rx,
                     window_s=window_s)
