"""Optimizer, schedules, training loop, and checkpoint ("MPCK") persistence.

One root seed drives named sub-streams (parameter init, the training stream
that feeds batch sampling / dropout / latent noise).  The training RNG state
is serialized into every checkpoint, so a resumed run reproduces the
uninterrupted loss trace bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (BadMagicError, ConfigError, DivergedRunError,
                     TruncatedFileError, VersionError)
from .losses import (TASK_NAMES, free_bits, kendall_total, kl_diag_gaussians,
                     task_losses, uw_filter_keeps)
from .model import (DropoutState, ModelConfig, create_params, decode,
                    encode_conditioning, posterior, prior, sample_latent)

CKPT_MAGIC = b"MPCK"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# sub-stream tags hashed into the root seed
STREAM_INIT = 0x11217
STREAM_TRAIN = 0x77A11


def lr_at(cfg: ModelConfig, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to lr_min_ratio * peak.

    step is 1-based: the first update uses peak/warmup, the last train_steps
    update sits at the end of the cosine.
    """
    if step <= cfg.lr_warmup_steps:
        return cfg.lr_peak * step / cfg.lr_warmup_steps
    span = max(1, cfg.train_steps - cfg.lr_warmup_steps)
    t = min(1.0, (step - cfg.lr_warmup_steps) / span)
    floor = cfg.lr_min_ratio * cfg.lr_peak
    return floor + 0.5 * (cfg.lr_peak - floor) * (1.0 + math.cos(math.pi * t))


def beta_at(cfg: ModelConfig, step: int) -> float:
    """KL weight: linear ramp from 0 to beta_max over the warmup."""
    return cfg.beta_max * min(1.0, step / cfg.beta_warmup_steps)


@dataclass
class TrainState:
    cfg: ModelConfig
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    rng: np.random.Generator = None

    @staticmethod
    def initialize(cfg: ModelConfig, seed: int) -> "TrainState":
        params = create_params(cfg, np.random.SeedSequence(
            [int(seed) & (2**64 - 1), STREAM_INIT]).generate_state(1)[0])
        state = TrainState(cfg=cfg, params=params)
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.rng = np.random.default_rng(
            np.random.SeedSequence([int(seed) & (2**64 - 1), STREAM_TRAIN]))
        return state


def global_grad_norm(params: dict) -> float:
    # fixed (sorted) reduction order: the result must not depend on dict
    # insertion order, or a resumed run drifts from the uninterrupted one
    # by an ulp in the clip scale
    total = 0.0
    for name in sorted(params):
        p = params[name]
        if p.grad is not None:
            total += float(np.sum(p.grad ** 2))
    return math.sqrt(total)


def adamw_update(state: TrainState, lr: float) -> float:
    """Clip by global norm, then one decoupled-weight-decay Adam step.

    Returns the pre-clip gradient norm.  The per-task log-deviations get
    lr * uw_lr_scale and no weight decay.
    """
    cfg = state.cfg
    norm = global_grad_norm(state.params)
    clip_scale = 1.0 if norm <= cfg.grad_clip else cfg.grad_clip / norm
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad * clip_scale
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        step_lr = lr * (cfg.uw_lr_scale if name == "kendall.s" else 1.0)
        update = (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + ADAM_EPS)
        p.data -= step_lr * update
        if name != "kendall.s":
            p.data -= step_lr * cfg.weight_decay * p.data
    return norm


@dataclass
class Batch:
    heightmaps: np.ndarray   # (B, H, H)
    tx_pov: np.ndarray       # (B, 12, R, R)
    rx_pov: np.ndarray
    coords: np.ndarray       # (B, 6)
    slots: np.ndarray        # (B, L, 10)
    present: np.ndarray      # (B, L)
    gain_n: np.ndarray       # (B, L, 2)
    excess_delay_n: np.ndarray
    aod_unit: np.ndarray
    aoa_unit: np.ndarray
    tof_n: np.ndarray        # (B,)
    rx_power_n: np.ndarray


def assemble_batch(records, heightmap: np.ndarray) -> Batch:
    if not records:
        raise ConfigError("cannot assemble an empty batch")
    b = len(records)
    slots = np.stack([r.payload.slot_matrix() for r in records])
    return Batch(
        heightmaps=np.broadcast_to(np.asarray(heightmap, np.float64),
                                   (b,) + heightmap.shape),
        tx_pov=np.stack([r.tx_pov for r in records]).astype(np.float64),
        rx_pov=np.stack([r.rx_pov for r in records]).astype(np.float64),
        coords=np.array([list(r.tx_pos) + list(r.rx_pos) for r in records]),
        slots=slots,
        present=np.stack([r.payload.present for r in records]),
        gain_n=np.stack([r.payload.gain_n for r in records]),
        excess_delay_n=np.stack([r.payload.excess_delay_n for r in records]),
        aod_unit=np.stack([r.payload.aod_unit for r in records]),
        aoa_unit=np.stack([r.payload.aoa_unit for r in records]),
        tof_n=np.array([r.payload.tof_n for r in records]),
        rx_power_n=np.array([r.payload.rx_power_n for r in records]),
    )


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimizer step on the ELBO-style objective; returns a log row.

    Raises DivergedRunError (with per-term diagnostics) when the loss or any
    gradient stops being finite; the parameters are left untouched in that case.
    """
    cfg = state.cfg
    drop = DropoutState(state.rng, cfg.dropout)
    cond = encode_conditioning(state.params, cfg, batch.heightmaps,
                               batch.tx_pov, batch.rx_pov, batch.coords, drop)
    mu_q, logvar_q = posterior(state.params, cfg, cond, batch.slots,
                               batch.tof_n, batch.rx_power_n, drop)
    mu_p, logvar_p = prior(state.params, cond.c_scene, cfg.d_z)
    z = sample_latent(mu_q, logvar_q, state.rng)
    pred = decode(state.params, cfg, z, cond, drop)

    losses = task_losses(pred, batch.present, batch.gain_n, batch.excess_delay_n,
                         batch.aod_unit, batch.aoa_unit, batch.tof_n,
                         batch.rx_power_n)
    kl = kl_diag_gaussians(mu_q, logvar_q, mu_p, logvar_p)
    kl_mean = ad.tmean(kl, axis=0)
    kl_term = free_bits(kl_mean, cfg.free_bits)
    step = state.step + 1
    beta = beta_at(cfg, step)
    total = kendall_total(losses, state.params["kendall.s"], beta, kl_term)

    row = {"step": step, "total": float(total.data), "beta": beta,
           "lr": lr_at(cfg, step), "kl": float(kl_mean.data.sum()),
           "kl_free_bits": float(kl_term.data)}
    for name in TASK_NAMES:
        row[f"loss_{name}"] = float(losses[name].data)
        row[f"sigma_{name}"] = float(
            np.exp(state.params["kendall.s"].data[TASK_NAMES.index(name)]))
    if not math.isfinite(row["total"]):
        raise DivergedRunError(f"non-finite loss at step {step}: {row}")

    ad.backward(total)
    for name, p in state.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            ad.zero_grads(state.params.values())
            raise DivergedRunError(
                f"non-finite gradient in {name!r} at step {step}: {row}")
    row["grad_norm"] = adamw_update(state, row["lr"])
    ad.zero_grads(state.params.values())
    state.step = step
    return row


def sample_batch_indices(state: TrainState, n_records: int) -> np.ndarray:
    b = state.cfg.batch_size
    return state.rng.choice(n_records, size=min(b, n_records), replace=n_records < b)


def train_run(dataset, cfg: ModelConfig, seed: int, steps: int = None,
              state: TrainState = None, on_step=None):
    """Run (or continue) a training run over the train split.

    Returns (state, rows).  Divergence of a step aborts the run by raising;
    the caller decides whether to keep partial artifacts.
    """
    train_records = dataset.split_records(0)
    if not train_records:
        raise ConfigError("dataset has no train-split records")
    if state is None:
        state = TrainState.initialize(cfg, seed)
    total_steps = cfg.train_steps if steps is None else state.step + steps
    hm = np.asarray(dataset.heightmap, np.float64)
    rows = []
    while state.step < total_steps:
        idx = sample_batch_indices(state, len(train_records))
        batch = assemble_batch([train_records[i] for i in idx], hm)
        row = train_step(state, batch)
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return state, rows


def final_uw_verdict(state: TrainState) -> dict:
    s_presence = float(state.params["kendall.s"].data[TASK_NAMES.index("presence")])
    return {"sigma_presence": math.exp(s_presence),
            "kept": uw_filter_keeps(s_presence)}


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(state: TrainState, path, seed: int, extra: dict = None) -> None:
    names = sorted(state.params)
    header = {
        "config": asdict(state.cfg),
        "step": state.step,
        "seed": int(seed),
        "rng_state": state.rng.bit_generator.state,
        "params": [[n, list(state.params[n].shape)] for n in names],
        "uw_verdict": final_uw_verdict(state),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for group in (state.params, state.m, state.v):
            for n in names:
                arr = group[n].data if isinstance(group[n], Tensor) else group[n]
                fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    """Returns (TrainState, header dict)."""
    with open(path, "rb") as fh:
        magic, version, blob_len = struct.unpack("<4sII", _read_exact(fh, 12))
        if magic != CKPT_MAGIC:
            raise BadMagicError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        params, m, v = {}, {}, {}
        for group in (params, m, v):
            for n, shape in header["params"]:
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(_read_exact(fh, count * 8),
                                    dtype="<f8").reshape(shape).copy()
                group[n] = arr
        if fh.read(1):
            raise TruncatedFileError("unexpected trailing bytes in checkpoint")
    state = TrainState(cfg=cfg,
                       params={n: Tensor(a, requires_grad=True)
                               for n, a in params.items()},
                       m=m, v=v, step=int(header["step"]))
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = header["rng_state"]
    return state, header


def checkpoint_is_kept(header: dict) -> bool:
    return bool(header.get("uw_verdict", {}).get("kept", False))
