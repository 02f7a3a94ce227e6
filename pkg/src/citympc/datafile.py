"""Binary dataset container ("MPCD").

Little-endian layout: magic, version, header (counts, L, resolutions,
normalization statistics, scene provenance, split plan), the shared
normalized heightmap, then fixed-size link records.  Round-trips are
bit-exact: channel payloads are stored as raw float64, imagery as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .channel import NormalizedLink, NormStats
from .errors import (BadMagicError, ConfigError, IncompatibleFileError,
                     TruncatedFileError, VersionError)
from .splits import SplitPlan

MAGIC = b"MPCD"
FORMAT_VERSION = 1

_HEADER_FMT = "<4sIQIIId" + "ddddd" + "Q32sII"
_REC_FIXED_FMT = "<QBxxxII" + "dddddd" + "dd"


@dataclass(frozen=True)
class DatasetRecord:
    """One serialized link: channel payload plus conditioning imagery."""

    link_id: int
    split: int                 # 0 train / 1 val / 2 test
    tx_region: int
    rx_region: int
    tx_pos: tuple
    rx_pos: tuple
    payload: NormalizedLink
    tx_pov: np.ndarray         # preprocessed (12, R, R) float32
    rx_pov: np.ndarray


@dataclass(frozen=True)
class Dataset:
    stats: NormStats
    plan: SplitPlan
    scene_seed: int
    config_digest: bytes
    heightmap: np.ndarray      # preprocessed (H, H) float32
    heightmap_mpp: float
    capacity: int
    pov_resolution: int
    records: tuple

    def split_records(self, split: int):
        return [r for r in self.records if r.split == split]


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def write_dataset(dataset: Dataset, path) -> None:
    cap = dataset.capacity
    res = dataset.pov_resolution
    hm_res = dataset.heightmap.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack(
            _HEADER_FMT, MAGIC, FORMAT_VERSION, len(dataset.records),
            cap, res, hm_res, float(dataset.heightmap_mpp),
            dataset.stats.mu_log, dataset.stats.sigma_log,
            dataset.stats.mu_rx, dataset.stats.sigma_rx, dataset.stats.window_s,
            dataset.scene_seed, dataset.config_digest,
            len(dataset.plan.tx_groups), len(dataset.plan.rx_groups)))
        fh.write(bytes(dataset.plan.tx_groups))
        fh.write(bytes(dataset.plan.rx_groups))
        fh.write(np.ascontiguousarray(dataset.heightmap, dtype=np.float32).tobytes())
        for rec in dataset.records:
            p = rec.payload
            if p.capacity != cap:
                raise ConfigError("record capacity differs from dataset capacity")
            fh.write(struct.pack(
                _REC_FIXED_FMT, rec.link_id, rec.split,
                rec.tx_region, rec.rx_region,
                *rec.tx_pos, *rec.rx_pos, p.tof_n, p.rx_power_n))
            fh.write(np.ascontiguousarray(p.present, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(p.gain_n, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(p.excess_delay_n, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(p.aod_unit, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(p.aoa_unit, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(rec.tx_pov, dtype=np.float32).tobytes())
            fh.write(np.ascontiguousarray(rec.rx_pov, dtype=np.float32).tobytes())


def read_dataset(path, expect_capacity: int = None) -> Dataset:
    with open(path, "rb") as fh:
        head = _read_exact(fh, struct.calcsize(_HEADER_FMT))
        (magic, version, n_records, cap, res, hm_res, hm_mpp,
         mu_log, sigma_log, mu_rx, sigma_rx, window_s,
         scene_seed, digest, n_tx, n_rx) = struct.unpack(_HEADER_FMT, head)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported dataset version {version}")
        if expect_capacity is not None and cap != expect_capacity:
            raise IncompatibleFileError(
                f"dataset has L={cap}, expected L={expect_capacity}")
        tx_groups = tuple(_read_exact(fh, n_tx))
        rx_groups = tuple(_read_exact(fh, n_rx))
        heightmap = np.frombuffer(_read_exact(fh, hm_res * hm_res * 4),
                                  dtype="<f4").reshape(hm_res, hm_res).copy()
        stats = NormStats(mu_log, sigma_log, mu_rx, sigma_rx, window_s)

        rec_fixed = struct.calcsize(_REC_FIXED_FMT)
        slot_bytes = cap * 8 + cap * 2 * 8 + cap * 8 + cap * 3 * 8 + cap * 3 * 8
        pov_bytes = 12 * res * res * 4
        records = []
        for _ in range(n_records):
            fixed = struct.unpack(_REC_FIXED_FMT, _read_exact(fh, rec_fixed))
            (link_id, split, tx_region, rx_region,
             tx0, tx1, tx2, rx0, rx1, rx2, tof_n, rx_power_n) = fixed
            blob = _read_exact(fh, slot_bytes)
            off = 0

            def take(count):
                nonlocal off
                arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
                off += count * 8
                return arr

            present = take(cap)
            gain_n = take(cap * 2).reshape(cap, 2)
            excess = take(cap)
            aod = take(cap * 3).reshape(cap, 3)
            aoa = take(cap * 3).reshape(cap, 3)
            tx_pov = np.frombuffer(_read_exact(fh, pov_bytes),
                                   dtype="<f4").reshape(12, res, res).copy()
            rx_pov = np.frombuffer(_read_exact(fh, pov_bytes),
                                   dtype="<f4").reshape(12, res, res).copy()
            payload = NormalizedLink(present=present, gain_n=gain_n,
                                     excess_delay_n=excess, aod_unit=aod,
                                     aoa_unit=aoa, tof_n=tof_n, rx_power_n=rx_power_n)
            records.append(DatasetRecord(
                link_id=link_id, split=split, tx_region=tx_region,
                rx_region=rx_region, tx_pos=(tx0, tx1, tx2), rx_pos=(rx0, rx1, rx2),
                payload=payload, tx_pov=tx_pov, rx_pov=rx_pov))
        trailing = fh.read(1)
        if trailing:
            raise TruncatedFileError("unexpected trailing bytes after last record")

    split_counts = np.bincount([r.split for r in records], minlength=3)[:3]
    total = max(1, split_counts.sum())
    plan = SplitPlan(fractions=tuple(float(c) / total for c in split_counts),
                     tx_groups=tx_groups, rx_groups=rx_groups)
    return Dataset(stats=stats, plan=plan, scene_seed=scene_seed,
                   config_digest=digest, heightmap=heightmap, heightmap_mpp=hm_mpp,
                   capacity=cap, pov_resolution=res, records=tuple(records))
