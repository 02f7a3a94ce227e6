"""Task losses, KL terms, and homoscedastic uncertainty weighting.

Seven task heads: path presence (BCE over every slot) plus six regression
targets.  Masked losses average only over slots that are truly active, per
link, then across the batch.  The total objective combines the tasks through
learned log-deviations (one per task) and adds a free-bits KL penalty.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergedRunError
from .model import Prediction

LOGIT_CLAMP = 30.0
TASK_NAMES = ("presence", "tof", "rx_power", "aoa", "aod", "excess_delay", "gain")

# A converged run drives the presence deviation toward ~1e-4; a final value
# still above this ceiling marks the run as diverged.
UW_SIGMA_CEILING = 1e-3


def _masked_link_mean(per_slot: Tensor, present: np.ndarray) -> Tensor:
    """Mean over active slots per link, then over the batch.

    per_slot: (B, L) tensor of per-slot penalties; present: (B, L) 0/1 mask
    with at least one active slot per link.
    """
    counts = present.sum(axis=1)
    per_link = ad.tsum(ad.mul(per_slot, Tensor(present)), axis=1)
    return ad.tmean(ad.mul(per_link, Tensor(1.0 / counts)))


def task_losses(pred: Prediction, present: np.ndarray, gain_n: np.ndarray,
                excess_delay_n: np.ndarray, aod_unit: np.ndarray,
                aoa_unit: np.ndarray, tof_n: np.ndarray,
                rx_power_n: np.ndarray) -> dict:
    """Return the seven scalar task losses keyed by TASK_NAMES."""
    logits = ad.clip(pred.presence_logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    # log(1 + e^l) - l*m: the stable binary cross-entropy for clamped logits
    softplus = ad.log(ad.add_const(ad.exp(logits), 1.0))
    bce = ad.tmean(ad.sub(softplus, ad.mul(logits, Tensor(present))))

    def mse_scalar(p: Tensor, target: np.ndarray) -> Tensor:
        d = ad.sub(p, Tensor(target))
        return ad.tmean(ad.mul(d, d))

    def cosine(p: Tensor, target: np.ndarray) -> Tensor:
        # 1 - <unit prediction, unit target>, masked mean over active slots
        align = ad.tsum(ad.mul(p, Tensor(target)), axis=2)
        return _masked_link_mean(ad.add_const(ad.scale(align, -1.0), 1.0), present)

    d_delay = ad.sub(pred.excess_delay, Tensor(excess_delay_n))
    d_gain = ad.sub(pred.gain, Tensor(gain_n))
    return {
        "presence": bce,
        "tof": mse_scalar(pred.tof_n, tof_n),
        "rx_power": mse_scalar(pred.rx_power_n, rx_power_n),
        "aoa": cosine(pred.aoa, aoa_unit),
        "aod": cosine(pred.aod, aod_unit),
        "excess_delay": _masked_link_mean(ad.mul(d_delay, d_delay), present),
        "gain": _masked_link_mean(ad.tsum(ad.mul(d_gain, d_gain), axis=2), present),
    }


def kl_diag_gaussians(mu_q: Tensor, logvar_q: Tensor,
                      mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Per-dimension KL(q || p) between diagonal Gaussians; shape (B, d_z)."""
    var_ratio = ad.exp(ad.sub(logvar_q, logvar_p))
    dmu = ad.sub(mu_q, mu_p)
    maha = ad.mul(ad.mul(dmu, dmu), ad.exp(ad.scale(logvar_p, -1.0)))
    inner = ad.add(ad.add(var_ratio, maha), ad.sub(logvar_p, logvar_q))
    return ad.scale(ad.add_const(inner, -1.0), 0.5)


def free_bits(kl_per_dim: Tensor, lam: float) -> Tensor:
    """Sum over latent dimensions of max(lam, KL_d).

    kl_per_dim: a (d_z,) vector (batch-averaged per-dimension KL).
    """
    excess = ad.clip(ad.add_const(kl_per_dim, -lam), 0.0, np.inf)
    return ad.add_const(ad.tsum(excess), lam * kl_per_dim.shape[0])


def kendall_total(losses: dict, s: Tensor, beta: float, kl_term: Tensor) -> Tensor:
    """Uncertainty-weighted sum of the task losses plus beta * KL.

    Classification (presence): L / sigma^2 + 2 log sigma.
    Regression tasks: L / (2 sigma^2) + log sigma, with sigma_k = exp(s_k).
    """
    inv_var = ad.exp(ad.scale(s, -2.0))
    total = ad.scale(kl_term, beta)
    for k, name in enumerate(TASK_NAMES):
        w = 1.0 if name == "presence" else 0.5
        logdev = 2.0 if name == "presence" else 1.0
        term = ad.add(ad.scale(ad.mul(losses[name], inv_var[k]), w),
                      ad.scale(s[k], logdev))
        total = ad.add(total, term)
    return total


def uw_sigmas(s: Tensor) -> dict:
    return {name: float(np.exp(s.data[k])) for k, name in enumerate(TASK_NAMES)}


def uw_filter_keeps(s_presence: float) -> bool:
    """True when the run passes the divergence filter (strict: exactly at the
    ceiling still keeps)."""
    return math.exp(s_presence) <= UW_SIGMA_CEILING


def check_uw_divergence(s: Tensor, step: int = None) -> None:
    """Reject runs whose final presence deviation never converged below the ceiling."""
    s_presence = float(s.data[TASK_NAMES.index("presence")])
    if not uw_filter_keeps(s_presence):
        where = "" if step is None else f" at step {step}"
        raise DivergedRunError(
            f"presence uncertainty {math.exp(s_presence):.3e} above ceiling "
            f"{UW_SIGMA_CEILING}{where}")
