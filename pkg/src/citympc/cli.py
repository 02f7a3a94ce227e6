"""Command-line entry point.

Subcommands: gen-scene, gen-dataset, stats, train, eval, generate, transfer,
powermap, timeit.  Exit codes: 0 ok, 2 configuration error, 3 data/file
error, 4 divergence-filter rejection.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import statistics
import sys
import time

import numpy as np

from .channel import LinkChannel
from .datafile import read_dataset
from .errors import ConfigError, DataFormatError, DivergedRunError
from .evaluation import evaluate_split, generate_for_record, truth_link
from .metrics import METRIC_NAMES, empirical_cdf
from .model import ModelConfig, encode_conditioning, no_dropout
from .pipeline import BuildConfig, build_dataset
from .render import render_pov
from .scene import SceneConfig, generate_scene
from .splits import SPLIT_NAMES
from .tracer import TraceConfig
from .training import (checkpoint_is_kept, final_uw_verdict,
                       load_checkpoint, save_checkpoint, train_run)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise DataFormatError(f"missing file: {path}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path} is not valid JSON: {e}") from e


def _scene_from_file(path):
    doc = _load_json(path)
    try:
        cfg = SceneConfig.from_json(json.dumps(doc["config"]))
        seed = int(doc["seed"])
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"{path} lacks scene seed/config: {e}") from e
    return generate_scene(seed, cfg), seed, cfg


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig()
    if getattr(args, "model_config", None):
        doc = _load_json(args.model_config)
        try:
            cfg = ModelConfig(**{**dataclasses.asdict(cfg), **doc})
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from e
    if getattr(args, "steps", None):
        cfg = dataclasses.replace(cfg, train_steps=args.steps)
    if getattr(args, "batch", None):
        cfg = dataclasses.replace(cfg, batch_size=args.batch)
    cfg.validate()
    return cfg


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _load_checkpoint_checked(path, allow_diverged: bool):
    state, header = load_checkpoint(path)
    if not checkpoint_is_kept(header) and not allow_diverged:
        sigma = header.get("uw_verdict", {}).get("sigma_presence")
        raise DivergedRunError(
            f"checkpoint {path} failed the divergence filter "
            f"(sigma_presence={sigma}); pass --allow-diverged to override")
    return state, header


def _link_to_json(link: LinkChannel) -> dict:
    return {
        "tx_pos": list(link.tx_pos), "rx_pos": list(link.rx_pos),
        "tof_s": link.tof_s, "rx_power_db": link.rx_power_db,
        "paths": [{
            "gain_re": p.gain_re, "gain_im": p.gain_im, "delay_s": p.delay_s,
            "aod_az_rad": p.aod_az_rad, "aod_el_rad": p.aod_el_rad,
            "aoa_az_rad": p.aoa_az_rad, "aoa_el_rad": p.aoa_el_rad,
        } for p in link.active_paths()],
    }


# ---------------------------------------------------------------- subcommands

def cmd_gen_scene(args):
    cfg = SceneConfig.from_json(json.dumps(_load_json(args.config))) \
        if args.config else SceneConfig()
    scene = generate_scene(args.seed, cfg)
    doc = {
        "seed": args.seed,
        "config": json.loads(cfg.to_json()),
        "buildings": [dataclasses.asdict(b) for b in scene.buildings],
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out}: {len(scene.buildings)} buildings, "
          f"extent {scene.extent_m} m")
    return EXIT_OK


def cmd_gen_dataset(args):
    _, scene_seed, scene_cfg = _scene_from_file(args.scene)
    build_cfg = BuildConfig(
        n_tx=args.n_tx, rx_pitch_m=args.rx_pitch,
        pov_resolution=args.resolution,
        trace=TraceConfig(max_reflections=args.max_reflections))
    dataset, report = build_dataset(scene_seed, scene_cfg, build_cfg,
                                    split_seed=args.seed)
    from .datafile import write_dataset
    write_dataset(dataset, args.out)
    sidecar = {
        "stats": dataclasses.asdict(dataset.stats),
        "report": report,
        "scene_seed": scene_seed,
        "split_seed": args.seed,
        "build_config": {k: (dataclasses.asdict(v) if dataclasses.is_dataclass(v)
                             else v)
                         for k, v in dataclasses.asdict(build_cfg).items()},
    }
    with open(args.out + ".stats.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    print(json.dumps(report))
    return EXIT_OK


def cmd_stats(args):
    ds = read_dataset(args.dataset)
    counts = [len(ds.split_records(s)) for s in range(3)]
    print(json.dumps({
        "stats": dataclasses.asdict(ds.stats),
        "n_records": len(ds.records),
        "splits": dict(zip(SPLIT_NAMES, counts)),
        "capacity": ds.capacity,
        "pov_resolution": ds.pov_resolution,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    dataset = read_dataset(args.dataset)
    rows_out = []

    if args.resume:
        state, header = load_checkpoint(args.resume)
        cfg = state.cfg
        seed = header["seed"]
        if args.steps:
            cfg = dataclasses.replace(cfg, train_steps=state.step + args.steps)
            state.cfg = cfg
    else:
        cfg = _model_config(args)
        seed = args.seed
        state = None

    def on_step(row):
        rows_out.append(row)
        if args.verbose and row["step"] % 100 == 0:
            print(f"step {row['step']}: total={row['total']:.4f} "
                  f"sigma_presence={row['sigma_presence']:.3e}", flush=True)

    try:
        state, _ = train_run(dataset, cfg, seed, state=state, on_step=on_step)
    finally:
        if rows_out and args.csv:
            _write_csv(args.csv, list(rows_out[0]), rows_out)
    save_checkpoint(state, args.out, seed)
    verdict = final_uw_verdict(state)
    print(json.dumps({"steps": state.step, "uw_verdict": verdict}))
    return EXIT_OK if verdict["kept"] or args.allow_diverged else EXIT_DIVERGED


def _run_eval(state, dataset, args):
    return evaluate_split(state.params, state.cfg, dataset, split=2,
                          seed=args.seed, linear_az_diff=args.linear_az_diff,
                          power_rescale=not args.no_power_rescale)


def cmd_eval(args):
    state, header = _load_checkpoint_checked(args.checkpoint, args.allow_diverged)
    dataset = read_dataset(args.dataset, expect_capacity=state.cfg.capacity)
    summary, rows = _run_eval(state, dataset, args)
    summary["uw_verdict"] = header.get("uw_verdict")
    import os
    os.makedirs(args.out_dir, exist_ok=True)
    fieldnames = sorted({k for r in rows for k in r}, key=lambda k: (k != "link_id", k))
    _write_csv(os.path.join(args.out_dir, "per_link.csv"), fieldnames, rows)
    _write_csv(os.path.join(args.out_dir, "summary.csv"), ["metric", "value"],
               [{"metric": k, "value": summary[k]} for k in METRIC_NAMES])
    truths = [truth_link(r, dataset.stats).rx_power_db
              for r in dataset.split_records(2)]
    grid = np.linspace(min(truths), max(truths), 101)
    _, f = empirical_cdf(truths, grid)
    _write_csv(os.path.join(args.out_dir, "cdf_rx_power.csv"), ["x", "F"],
               [{"x": x, "F": y} for x, y in zip(grid, f)])
    with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_generate(args):
    state, _ = _load_checkpoint_checked(args.checkpoint, args.allow_diverged)
    dataset = read_dataset(args.dataset, expect_capacity=state.cfg.capacity)
    matches = [r for r in dataset.records if r.link_id == args.link_id]
    if not matches:
        raise ConfigError(f"link id {args.link_id} not in dataset")
    link = generate_for_record(state.params, state.cfg, dataset, matches[0],
                               args.seed, power_rescale=not args.no_power_rescale)
    doc = {"link_id": args.link_id, "seed": args.seed,
           "empty": link is None}
    if link is not None:
        doc["realization"] = _link_to_json(link)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_transfer(args):
    cells = {}
    headers = []
    for ckpt in args.checkpoints:
        state, header = _load_checkpoint_checked(ckpt, args.allow_diverged)
        headers.append(header)
        for ds_path in args.datasets:
            dataset = read_dataset(ds_path, expect_capacity=state.cfg.capacity)
            summary, _ = _run_eval(state, dataset, args)
            cells[(ckpt, ds_path)] = summary[args.metric]
    rows = []
    for ckpt in args.checkpoints:
        row = {"checkpoint": ckpt}
        for ds_path in args.datasets:
            row[ds_path] = cells[(ckpt, ds_path)]
        rows.append(row)
    _write_csv(args.out, ["checkpoint"] + list(args.datasets), rows)
    print(json.dumps({f"{c} x {d}": v for (c, d), v in cells.items()},
                     sort_keys=True))
    return EXIT_OK


def cmd_powermap(args):
    state, _ = _load_checkpoint_checked(args.checkpoint, args.allow_diverged)
    dataset = read_dataset(args.dataset, expect_capacity=state.cfg.capacity)
    scene, _, _ = _scene_from_file(args.scene)
    from .features import preprocess_pov
    from .model import generate_link
    tx = tuple(float(v) for v in args.tx.split(","))
    if len(tx) != 3:
        raise ConfigError("--tx must be x,y,z")
    n = int(scene.extent_m // args.pitch)
    hm = np.asarray(dataset.heightmap, np.float64)
    rows = []
    for iy in range(n):
        for ix in range(n):
            x = (ix + 0.5) * args.pitch
            y = (iy + 0.5) * args.pitch
            rx = (x, y, args.rx_height)
            if scene.building_at_xy(x, y) is not None:
                rows.append({"x": x, "y": y, "rx_power_db": ""})
                continue
            tx_pov = preprocess_pov(render_pov(scene, tx, rx,
                                               dataset.pov_resolution))
            rx_pov = preprocess_pov(render_pov(scene, rx, tx,
                                               dataset.pov_resolution))
            rng = np.random.default_rng(np.random.SeedSequence(
                [int(args.seed) & (2**64 - 1), 0x93A9, iy * n + ix]))
            link = generate_link(state.params, state.cfg, dataset.stats, hm,
                                 tx_pov, rx_pov, tx, rx, rng)
            rows.append({"x": x, "y": y,
                         "rx_power_db": "" if link is None else link.rx_power_db})
    _write_csv(args.out, ["x", "y", "rx_power_db"], rows)
    print(f"wrote {args.out}: {n}x{n} grid")
    return EXIT_OK


def cmd_timeit(args):
    state, _ = _load_checkpoint_checked(args.checkpoint, args.allow_diverged)
    cfg = state.cfg
    e2e, fwd = [], []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        dataset = read_dataset(args.dataset, expect_capacity=cfg.capacity)
        recs = dataset.records[:args.links]
        for rec in recs:
            generate_for_record(state.params, cfg, dataset, rec, args.seed)
        e2e.append((time.perf_counter() - t0) * 1000.0 / len(recs))

        hm = np.asarray(dataset.heightmap, np.float64)
        batches = [(np.asarray(r.tx_pov, np.float64),
                    np.asarray(r.rx_pov, np.float64),
                    np.array(list(r.tx_pos) + list(r.rx_pos))) for r in recs]
        t0 = time.perf_counter()
        for tx_pov, rx_pov, coords in batches:
            encode_conditioning(state.params, cfg, hm[None], tx_pov[None],
                                rx_pov[None], coords[None], no_dropout())
        fwd.append((time.perf_counter() - t0) * 1000.0 / len(recs))
    out = {
        "end_to_end_ms_per_link": {"mean": statistics.mean(e2e),
                                   "std": statistics.stdev(e2e) if len(e2e) > 1 else 0.0},
        "model_forward_ms_per_link": {"mean": statistics.mean(fwd),
                                      "std": statistics.stdev(fwd) if len(fwd) > 1 else 0.0},
        "repeats": args.repeats, "links": len(recs),
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="citympc",
                                description="Procedural multipath-channel datasets "
                                            "and a generative channel model.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-scene", help="generate a procedural urban scene")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--config", help="scene config JSON file")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_scene)

    sp = sub.add_parser("gen-dataset", help="trace links and write a dataset")
    sp.add_argument("--scene", required=True, help="scene JSON from gen-scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0, help="split-plan seed")
    sp.add_argument("--n-tx", type=int, default=6)
    sp.add_argument("--rx-pitch", type=float, default=8.0)
    sp.add_argument("--resolution", type=int, default=16)
    sp.add_argument("--max-reflections", type=int, default=2)
    sp.set_defaults(fn=cmd_gen_dataset)

    sp = sub.add_parser("stats", help="print dataset statistics")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(fn=cmd_stats)

    sp = sub.add_parser("train", help="train the generative model")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--model-config", help="model config JSON overrides")
    sp.add_argument("--csv", help="step-indexed training trace CSV")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--allow-diverged", action="store_true")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_train)

    def eval_args(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--allow-diverged", action="store_true")
        sp.add_argument("--linear-az-diff", action="store_true",
                        help="literal |a-b| azimuth difference instead of circular")
        sp.add_argument("--no-power-rescale", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out-dir", required=True)
    eval_args(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("generate", help="sample one link realization")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--link-id", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--allow-diverged", action="store_true")
    sp.add_argument("--no-power-rescale", action="store_true")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("transfer", help="cross checkpoints x datasets metric grid")
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--datasets", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metric", default="rx_power_mae_db")
    eval_args(sp)
    sp.set_defaults(fn=cmd_transfer)

    sp = sub.add_parser("powermap", help="predicted received power over an RX grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True, help="source of normalization stats")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--tx", required=True, help="x,y,z of the fixed transmitter")
    sp.add_argument("--pitch", type=float, default=16.0)
    sp.add_argument("--rx-height", type=float, default=1.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--allow-diverged", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_powermap)

    sp = sub.add_parser("timeit", help="per-link generation latency")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--links", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--allow-diverged", action="store_true")
    sp.set_defaults(fn=cmd_timeit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergedRunError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
