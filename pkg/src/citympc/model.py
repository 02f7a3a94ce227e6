"""Conditional VAE over per-path channel parameters.

Four modules: a conditioning encoder (three per-channel-token ViT towers plus
a coordinate token), an MLP prior, a cross-attending posterior encoder, and a
slot-query decoder with separate TX-routed and RX-routed angle heads.  All
compute runs through the local autodiff engine in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import DEFAULT_L
from .errors import ConfigError
from .features import FourierEncoding, fourier_encode


@dataclass(frozen=True)
class ModelConfig:
    capacity: int = DEFAULT_L
    d_z: int = 64
    d_scene: int = 128
    d_model: int = 32
    heads: int = 2
    vit_layers: int = 1
    posterior_layers: int = 1
    decoder_layers: int = 1
    patch_size: int = 8
    pov_resolution: int = 16
    ffn_width: int = 128
    # Desk-scale training runs with dropout off: at a few thousand steps the
    # regularization noise floor dominates the presence loss, which has to
    # converge far enough for the divergence filter to keep the run.
    dropout: float = 0.0
    free_bits: float = 0.1
    beta_max: float = 0.1
    beta_warmup_steps: int = 500
    lr_peak: float = 3.5e-4
    lr_warmup_steps: int = 100
    lr_min_ratio: float = 0.01
    grad_clip: float = 1.0
    weight_decay: float = 1e-4
    train_steps: int = 2000
    batch_size: int = 32
    coord_feature_dim: int = 128
    # Learning-rate multiplier for the per-task log-deviations: at short desk
    # budgets their optimum (log sqrt of the task loss) is many Adam steps away
    # from the zero init, so they get a faster schedule than the network weights.
    uw_lr_scale: float = 100.0

    def validate(self):
        for name in ("capacity", "d_z", "d_scene", "d_model", "heads", "vit_layers",
                     "posterior_layers", "decoder_layers", "patch_size",
                     "pov_resolution", "ffn_width", "beta_warmup_steps",
                     "lr_warmup_steps", "train_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pov_resolution % self.patch_size != 0:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide resolution {self.pov_resolution}")
        if self.d_model % self.heads != 0:
            raise ConfigError("heads must divide d_model")

    @property
    def patches_per_channel(self) -> int:
        return (self.pov_resolution // self.patch_size) ** 2

    @property
    def memory_tokens(self) -> int:
        """Full memory: global (1 ch) + TX (12 ch) + RX (12 ch) tokens + 1 coord token."""
        return self.patches_per_channel * (1 + 12 + 12) + 1

    @property
    def side_memory_tokens(self) -> int:
        """TX-only or RX-only memory: global + one POV tower + coord token."""
        return self.patches_per_channel * (1 + 12) + 1


def paper_config() -> ModelConfig:
    return ModelConfig(d_model=256, heads=8, vit_layers=3, posterior_layers=2,
                       decoder_layers=3, patch_size=32, pov_resolution=128,
                       ffn_width=1024, beta_warmup_steps=11000, lr_warmup_steps=1000,
                       uw_lr_scale=1.0, dropout=0.1)


# ----------------------------------------------------------------- parameters

def _init_linear(params, name, fan_in, fan_out, rng):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    params[f"{name}.W"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _init_ln(params, name):
    params[f"{name}.g"] = Tensor(np.ones(1), requires_grad=True)
    params[f"{name}.o"] = Tensor(np.zeros(1), requires_grad=True)


def _init_attn(params, name, d_model, rng):
    for part in ("q", "k", "v", "o"):
        _init_linear(params, f"{name}.{part}", d_model, d_model, rng)


def _init_block(params, name, cfg, rng, cross: bool):
    _init_ln(params, f"{name}.ln1")
    _init_attn(params, f"{name}.self", cfg.d_model, rng)
    if cross:
        _init_ln(params, f"{name}.lnx")
        _init_attn(params, f"{name}.cross", cfg.d_model, rng)
    _init_ln(params, f"{name}.ln2")
    _init_linear(params, f"{name}.ffn1", cfg.d_model, cfg.ffn_width, rng)
    _init_linear(params, f"{name}.ffn2", cfg.ffn_width, cfg.d_model, rng)


def create_params(cfg: ModelConfig, seed: int) -> dict:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x1217]))
    params = {}
    p2 = cfg.patch_size ** 2
    for tower, channels in (("g", 1), ("tx", 12), ("rx", 12)):
        _init_linear(params, f"{tower}.patch", p2, cfg.d_model, rng)
        params[f"{tower}.chan"] = Tensor(
            rng.normal(0.0, 0.02, size=(channels, cfg.d_model)), requires_grad=True)
        params[f"{tower}.pos"] = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.patches_per_channel, cfg.d_model)),
            requires_grad=True)
        for i in range(cfg.vit_layers):
            _init_block(params, f"{tower}.l{i}", cfg, rng, cross=False)
    _init_linear(params, "coord.feat", 96, cfg.coord_feature_dim, rng)
    _init_linear(params, "coord.token", cfg.coord_feature_dim, cfg.d_model, rng)
    _init_linear(params, "fuse.h", 3 * cfg.d_model + cfg.coord_feature_dim,
                 cfg.d_scene, rng)
    _init_linear(params, "fuse.out", cfg.d_scene, cfg.d_scene, rng)
    _init_linear(params, "prior.h", cfg.d_scene, cfg.d_scene, rng)
    _init_linear(params, "prior.out", cfg.d_scene, 2 * cfg.d_z, rng)
    _init_linear(params, "post.in", 10, cfg.d_model, rng)
    for i in range(cfg.posterior_layers):
        _init_block(params, f"post.l{i}", cfg, rng, cross=True)
    _init_linear(params, "post.h", cfg.d_model + 2 + cfg.d_scene, cfg.d_scene, rng)
    _init_linear(params, "post.out", cfg.d_scene, 2 * cfg.d_z, rng)
    params["dec.slots"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.capacity, cfg.d_model)),
                                 requires_grad=True)
    # z feeds every slot its own additive offset so slots can specialize
    _init_linear(params, "dec.zproj", cfg.d_z, cfg.capacity * cfg.d_model, rng)
    for i in range(cfg.decoder_layers):
        _init_block(params, f"dec.l{i}", cfg, rng, cross=True)
    for side in ("aod", "aoa"):
        _init_ln(params, f"dec.{side}.ln")
        _init_attn(params, f"dec.{side}.attn", cfg.d_model, rng)
        _init_linear(params, f"dec.{side}.head", cfg.d_model, 3, rng)
    _init_linear(params, "dec.presence", cfg.d_model, 1, rng)
    _init_linear(params, "dec.delay", cfg.d_model, 1, rng)
    _init_linear(params, "dec.gain", cfg.d_model, 2, rng)
    _init_linear(params, "dec.tof", cfg.d_model, 1, rng)
    _init_linear(params, "dec.prx", cfg.d_model, 1, rng)
    params["kendall.s"] = Tensor(np.zeros(7), requires_grad=True)
    return params


# ------------------------------------------------------------- forward pieces

class DropoutState:
    """Draws dropout masks from the run RNG; None disables dropout."""

    def __init__(self, rng, p: float):
        self.rng = rng
        self.p = p

    def apply(self, x: Tensor) -> Tensor:
        if self.rng is None or self.p <= 0.0:
            return x
        keep = 1.0 - self.p
        mask = (self.rng.random(x.shape) < keep) / keep
        return ad.mul(x, Tensor(mask))


def _linear(params, name, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _ln(params, name, x: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), params[f"{name}.g"]), params[f"{name}.o"])


def _mha(params, name, q_in: Tensor, kv_in: Tensor, heads: int,
         drop: DropoutState) -> Tensor:
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    dh = d // heads
    q = ad.transpose(ad.reshape(_linear(params, f"{name}.q", q_in), (b, tq, heads, dh)), 1, 2)
    k = ad.transpose(ad.reshape(_linear(params, f"{name}.k", kv_in), (b, tk, heads, dh)), 1, 2)
    v = ad.transpose(ad.reshape(_linear(params, f"{name}.v", kv_in), (b, tk, heads, dh)), 1, 2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, 2, 3)), 1.0 / math.sqrt(dh))
    attn = drop.apply(ad.softmax(scores))
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), 1, 2), (b, tq, d))
    return _linear(params, f"{name}.o", out)


def _ffn(params, name, x: Tensor, drop: DropoutState) -> Tensor:
    return _linear(params, f"{name}.ffn2",
                   drop.apply(ad.gelu(_linear(params, f"{name}.ffn1", x))))


def _block(params, name, x: Tensor, memory, heads, drop: DropoutState) -> Tensor:
    """Pre-norm residual block: self-attention, optional cross-attention, FFN."""
    normed = _ln(params, f"{name}.ln1", x)
    x = ad.add(x, drop.apply(_mha(params, f"{name}.self", normed, normed, heads, drop)))
    if memory is not None:
        x = ad.add(x, drop.apply(_mha(params, f"{name}.cross",
                                      _ln(params, f"{name}.lnx", x), memory,
                                      heads, drop)))
    x = ad.add(x, drop.apply(_ffn(params, name, _ln(params, f"{name}.ln2", x), drop)))
    return x


def _patch_tokens(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C * n_patches, patch*patch), channel-major token order."""
    b, c, h, w = images.shape
    nh, nw = h // patch, w // patch
    x = images.reshape(b, c, nh, patch, nw, patch)
    x = x.transpose(0, 1, 2, 4, 3, 5).reshape(b, c * nh * nw, patch * patch)
    return x


def _tower(params, tower: str, images: np.ndarray, cfg: ModelConfig,
           drop: DropoutState) -> Tensor:
    b, c = images.shape[0], images.shape[1]
    np_ = cfg.patches_per_channel
    raw = _patch_tokens(images, cfg.patch_size)
    tok = _linear(params, f"{tower}.patch", Tensor(raw))
    chan = np.repeat(np.arange(c), np_)
    pos = np.tile(np.arange(np_), c)
    tok = ad.add(tok, params[f"{tower}.chan"][chan])
    tok = ad.add(tok, params[f"{tower}.pos"][pos])
    for i in range(cfg.vit_layers):
        tok = _block(params, f"{tower}.l{i}", tok, None, cfg.heads, drop)
    return tok


def _pool_heightmap(hm: np.ndarray, resolution: int) -> np.ndarray:
    """Average-pool a square heightmap down to the model resolution."""
    src = hm.shape[-1]
    if src == resolution:
        return hm
    if src % resolution != 0:
        raise ConfigError(f"heightmap size {src} not divisible by {resolution}")
    f = src // resolution
    return hm.reshape(*hm.shape[:-2], resolution, f, resolution, f).mean(axis=(-3, -1))


@dataclass
class Conditioning:
    memory: Tensor       # (B, M, d_model)
    memory_tx: Tensor    # global + TX + coord token
    memory_rx: Tensor
    c_scene: Tensor      # (B, d_scene)


def encode_conditioning(params, cfg: ModelConfig, heightmaps: np.ndarray,
                        tx_pov: np.ndarray, rx_pov: np.ndarray,
                        coords: np.ndarray, drop: DropoutState) -> Conditioning:
    """Build the scene token memory and the fused scene embedding c'.

    heightmaps: (B, H, H); tx_pov/rx_pov: (B, 12, R, R); coords: (B, 6) raw meters.
    """
    hm = _pool_heightmap(heightmaps, cfg.pov_resolution)[:, None, :, :]
    g_tok = _tower(params, "g", hm, cfg, drop)
    tx_tok = _tower(params, "tx", np.asarray(tx_pov, dtype=np.float64), cfg, drop)
    rx_tok = _tower(params, "rx", np.asarray(rx_pov, dtype=np.float64), cfg, drop)

    enc = FourierEncoding()
    feats = np.stack([fourier_encode(c, enc) for c in coords])
    coord_feat = ad.gelu(_linear(params, "coord.feat", Tensor(feats)))
    coord_tok = ad.reshape(_linear(params, "coord.token", coord_feat),
                           (coords.shape[0], 1, cfg.d_model))

    memory = ad.concat([g_tok, tx_tok, rx_tok, coord_tok], axis=1)
    memory_tx = ad.concat([g_tok, tx_tok, coord_tok], axis=1)
    memory_rx = ad.concat([g_tok, rx_tok, coord_tok], axis=1)

    pooled = ad.concat([ad.tmean(g_tok, axis=1), ad.tmean(tx_tok, axis=1),
                        ad.tmean(rx_tok, axis=1), coord_feat], axis=1)
    c_scene = _linear(params, "fuse.out", ad.gelu(_linear(params, "fuse.h", pooled)))
    return Conditioning(memory=memory, memory_tx=memory_tx,
                        memory_rx=memory_rx, c_scene=c_scene)


def prior(params, c_scene: Tensor, d_z: int):
    out = _linear(params, "prior.out", ad.gelu(_linear(params, "prior.h", c_scene)))
    return out[:, :d_z], out[:, d_z:]


def _sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def posterior(params, cfg: ModelConfig, cond: Conditioning, slot_matrix: np.ndarray,
              tof_n: np.ndarray, rx_power_n: np.ndarray, drop: DropoutState):
    """q(z | x, c): path tokens cross-attend to the scene memory, presence-masked
    pooling, then an MLP head over [pooled, P_rx, tof, c']."""
    b = slot_matrix.shape[0]
    present = slot_matrix[:, :, 9]
    if np.any(present.sum(axis=1) < 1):
        raise ConfigError("posterior requires at least one active path per link")
    tok = _linear(params, "post.in", Tensor(slot_matrix))
    tok = ad.add(tok, Tensor(_sinusoidal_positions(cfg.capacity, cfg.d_model)))
    for i in range(cfg.posterior_layers):
        tok = _block(params, f"post.l{i}", tok, cond.memory, cfg.heads, drop)
    mask = present[:, :, None]
    pooled = ad.tsum(ad.mul(tok, Tensor(mask)), axis=1)
    pooled = ad.mul(pooled, Tensor((1.0 / present.sum(axis=1))[:, None]))
    head_in = ad.concat([pooled, Tensor(rx_power_n.reshape(b, 1)),
                         Tensor(tof_n.reshape(b, 1)), cond.c_scene], axis=1)
    out = _linear(params, "post.out", ad.gelu(_linear(params, "post.h", head_in)))
    return out[:, :cfg.d_z], out[:, cfg.d_z:]


def sample_latent(mu: Tensor, logvar: Tensor, rng) -> Tensor:
    """Reparameterization: z = mu + exp(logvar / 2) * eps."""
    eps = rng.standard_normal(mu.shape)
    return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps)))


@dataclass
class Prediction:
    presence_logit: Tensor  # (B, L)
    excess_delay: Tensor    # (B, L) in [0, 1]
    gain: Tensor            # (B, L, 2)
    aod: Tensor             # (B, L, 3) unit rows
    aoa: Tensor             # (B, L, 3)
    tof_n: Tensor           # (B,)
    rx_power_n: Tensor      # (B,)


def decode(params, cfg: ModelConfig, z: Tensor, cond: Conditioning,
           drop: DropoutState) -> Prediction:
    b = z.shape[0]
    zproj = ad.reshape(_linear(params, "dec.zproj", z), (b, cfg.capacity, cfg.d_model))
    slots = ad.add(ad.reshape(params["dec.slots"], (1, cfg.capacity, cfg.d_model)), zproj)
    for i in range(cfg.decoder_layers):
        slots = _block(params, f"dec.l{i}", slots, cond.memory, cfg.heads, drop)

    def angle_head(side: str, memory: Tensor) -> Tensor:
        x = ad.add(slots, drop.apply(_mha(params, f"dec.{side}.attn",
                                          _ln(params, f"dec.{side}.ln", slots),
                                          memory, cfg.heads, drop)))
        return ad.l2_normalize(_linear(params, f"dec.{side}.head", x))

    pooled = ad.tmean(slots, axis=1)
    return Prediction(
        presence_logit=ad.reshape(_linear(params, "dec.presence", slots), (b, cfg.capacity)),
        excess_delay=ad.sigmoid(
            ad.reshape(_linear(params, "dec.delay", slots), (b, cfg.capacity))),
        gain=_linear(params, "dec.gain", slots),
        aod=angle_head("aod", cond.memory_tx),
        aoa=angle_head("aoa", cond.memory_rx),
        tof_n=ad.reshape(_linear(params, "dec.tof", pooled), (b,)),
        rx_power_n=ad.reshape(_linear(params, "dec.prx", pooled), (b,)),
    )


def no_dropout() -> DropoutState:
    return DropoutState(None, 0.0)


PRESENCE_THRESHOLD = 0.5


def generate_link(params, cfg: ModelConfig, stats, heightmap: np.ndarray,
                  tx_pov: np.ndarray, rx_pov: np.ndarray, tx_pos, rx_pos,
                  rng, power_rescale: bool = True):
    """Sample one link realization from the learned prior.

    Returns a LinkChannel, or None when no slot clears the presence threshold
    (an empty draw).  With power_rescale the active gains are renormalized so
    their total power equals the predicted received power exactly; without it
    the raw gain rows are only scaled by the predicted power.
    """
    from .channel import LinkChannel, MpcPath, decode_direction, \
        denormalize_rx_power, denormalize_tof

    coords = np.concatenate([np.asarray(tx_pos, float), np.asarray(rx_pos, float)])
    drop = no_dropout()
    cond = encode_conditioning(params, cfg, heightmap[None], tx_pov[None],
                               rx_pov[None], coords[None], drop)
    mu_p, logvar_p = prior(params, cond.c_scene, cfg.d_z)
    z = sample_latent(mu_p, logvar_p, rng)
    pred = decode(params, cfg, z, cond, drop)

    present = 1.0 / (1.0 + np.exp(-pred.presence_logit.data[0])) > PRESENCE_THRESHOLD
    if not np.any(present):
        return None
    gains = pred.gain.data[0].copy()
    gains[~present] = 0.0
    p_hat = 10.0 ** (denormalize_rx_power(float(pred.rx_power_n.data[0]), stats) / 10.0)
    raw_power = float(np.sum(gains[present] ** 2))
    if raw_power <= 1e-30:
        return None
    if power_rescale:
        gains *= math.sqrt(p_hat / raw_power)
    else:
        gains *= math.sqrt(p_hat)
    tof_s = max(denormalize_tof(float(pred.tof_n.data[0]), stats), 1e-12)
    paths = []
    for i in np.flatnonzero(present):
        aod_az, aod_el = decode_direction(pred.aod.data[0, i])
        aoa_az, aoa_el = decode_direction(pred.aoa.data[0, i])
        paths.append(MpcPath(
            present=True, gain_re=float(gains[i, 0]), gain_im=float(gains[i, 1]),
            delay_s=tof_s + float(pred.excess_delay.data[0, i]) * stats.window_s,
            aod_az_rad=aod_az, aod_el_rad=aod_el,
            aoa_az_rad=aoa_az, aoa_el_rad=aoa_el))
    return LinkChannel.from_paths(paths, tx_pos, rx_pos, capacity=cfg.capacity)
