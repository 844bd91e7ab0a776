"""Command line: ``vuwb simulate | explore | localize | evaluate``.

Exit codes: 0 success, 2 usage, 3 config, 4 dataset, 5 map file,
6 pipeline, 7 evaluation.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import eval as ev
from .dataset import (FMT, export_dataset, load_dataset, load_map, read_anchor_estimates, read_tum,
                      save_map, write_anchor_estimates, write_tum)
from .errors import ConfigError, DatasetError, VuwbError
from .sim import simulate
from .slam.pipeline import run_exploration, run_localization

log = logging.getLogger("vuwb")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_json(path, obj):
    with open(path, "w", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _created() -> str:
    """UTC creation time; SOURCE_DATE_EPOCH pins it for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc) if epoch
           else datetime.datetime.now(datetime.timezone.utc))
    return now.isoformat(timespec="seconds")


def _manifest(path, cfg: config_mod.RunConfig, **extra):
    _write_json(path, {"config_hash": cfg.hash(), "seed": cfg.seed, "created": _created(), **extra})


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.world.anchor_rule = args.mode
    return cfg


def _out_dir(args, cfg) -> str:
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory given (--out or config 'out')")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ds = simulate(cfg.trajectory, cfg.sensor, cfg.world, cfg.seed, kf_every=cfg.pipeline.kf_every)
    ds.manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict(),
                   "created": _created()}
    export_dataset(ds, out)
    log.info("dataset written to %s", out)
    return 0


def _write_trace(path, rows):
    with open(path, "w", newline="\n") as f:
        f.write("stage,call,iteration,cost\n")
        for stage, call, it, cost in rows:
            f.write(f"{stage},{call},{it},{FMT % cost}\n")


def _write_events(path, events):
    with open(path, "w", newline="\n") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True, default=_json_default) + "\n")


def cmd_explore(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(args.dataset)
    camera = ds.camera or cfg.sensor.camera
    T_cb = ds.T_cb or cfg.sensor.T_cb
    res = run_exploration(ds, cfg.pipeline, camera, T_cb)
    save_map(os.path.join(out, "map.json"), res.map, camera, T_cb)
    write_tum(os.path.join(out, "trajectory.txt"), res.trajectory)
    write_tum(os.path.join(out, "keyframes.txt"), res.keyframe_trajectory)
    write_anchor_estimates(os.path.join(out, "anchors_est.csv"), res.map.anchors.values())
    _write_events(os.path.join(out, "events.jsonl"), res.events)
    _write_trace(os.path.join(out, "solver_trace.csv"), res.solver_trace)
    _manifest(os.path.join(out, "manifest.json"), cfg, command="explore", dataset=os.path.abspath(args.dataset),
              scale=res.scale)
    return 0


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(args.dataset)
    m = load_map(args.map)
    camera = ds.camera or cfg.sensor.camera
    T_cb = ds.T_cb or cfg.sensor.T_cb
    res = run_localization(ds, m, cfg.pipeline, camera, T_cb)
    write_tum(os.path.join(out, "trajectory.txt"), res.trajectory)
    _write_events(os.path.join(out, "events.jsonl"), res.events)
    _manifest(os.path.join(out, "manifest.json"), cfg, command="localize", dataset=os.path.abspath(args.dataset),
              map=os.path.abspath(args.map))
    return 0


def cmd_evaluate(args) -> int:
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    if (args.est_anchors is None) != (args.gt_anchors is None):
        raise ConfigError("--est-anchors and --gt-anchors go together")
    est_a = read_anchor_estimates(args.est_anchors) if args.est_anchors else None
    gt_a = read_anchor_estimates(args.gt_anchors) if args.gt_anchors else None
    metrics = ev.metrics(est, gt, est_a, gt_a)
    al = ev.align_trajectories(est, gt)
    ts, err = ev.translation_errors(est, gt, al)
    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "metrics.json"), metrics)
    with open(os.path.join(out, "errors.csv"), "w", newline="\n") as f:
        f.write("timestamp,error_m\n")
        for t, e in zip(ts, err):
            f.write(f"{FMT % t},{FMT % e}\n")
    print(f"ATE mean {metrics['ate']['mean']:.4f} m, rmse {metrics['ate']['rmse']:.4f} m, "
          f"scale error {100 * metrics['scale_error']:.3f} %"
          + (f", anchors mean {metrics['anchors']['mean']:.4f} m" if "anchors" in metrics else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vuwb", description="Visual-UWB SLAM toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    s.add_argument("--out", help="dataset directory")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--mode", choices=("distance", "period"), help="anchor deployment rule")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("explore", help="build a map from a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_explore)

    lo = sub.add_parser("localize", help="track a dataset against a saved map")
    lo.add_argument("--dataset", required=True)
    lo.add_argument("--map", required=True)
    lo.add_argument("--config")
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_localize)

    v = sub.add_parser("evaluate", help="ATE, anchor errors and scale error")
    v.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    v.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    v.add_argument("--est-anchors")
    v.add_argument("--gt-anchors")
    v.add_argument("--out", required=True, help="directory for metrics.json and errors.csv")
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VuwbError as exc:
        print(f"vuwb {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vuwb {args.command}: {exc}", file=sys.stderr)
        return DatasetError.exit_code


if __name__ == "__main__":
    sys.exit(main())
