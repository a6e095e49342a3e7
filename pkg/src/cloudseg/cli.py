"""Command-line entry points: train, eval, infer, bench-attention,
grad-check, synth.

Exit codes: 0 ok, 1 usage/config, 2 data or file format, 3 numeric
failure, 4 acceptance (gradient suite) failure. Every failure prints one
machine-parsable line to stderr: ``error[<exit>] <category>: <message>``.
"""

import os
import sys

# Pin BLAS to one thread before numpy loads: stabilizes benchmark slopes
# and makes training runs reproducible. --parallel (bench) opts out.
if "--parallel" not in sys.argv:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse
from dataclasses import fields

import numpy as np

from .config import RunConfig, build_run_config, parse_value
from .errors import ConfigError, DataFormatError, NumericError
from .geometry import PointCloud

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_ACCEPTANCE = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(parser):
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            default=None, metavar="V")


def _build_parser():
    parser = _Parser(prog="cloudseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("train", "train a model, write checkpoint and metrics CSV"),
        ("eval", "evaluate a checkpoint: per-class IoU table and CSV"),
        ("infer", "predict labels for one scan, written in label format"),
        ("bench-attention", "time downsampled vs full attention, write CSV"),
        ("grad-check", "run the finite-difference gradient suite"),
        ("synth", "generate labeled synthetic scenes to disk"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", default=None, help="config file (key = value lines)")
        _add_config_flags(p)
        if name == "infer":
            p.add_argument("--scan", required=True, help="input .bin scan")
            p.add_argument("--out", default=None, help="output .label path")
        if name == "bench-attention":
            p.add_argument("--parallel", action="store_true",
                           help="let BLAS use all cores (less stable slopes)")
        if name == "grad-check":
            p.add_argument("--seeds", default="0", help="comma-separated seed list")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = parse_value(f.name, raw) if isinstance(raw, str) else raw
    return build_run_config(args.config, overrides)


def _load_remap(cfg):
    from .kitti_io import BUNDLED_REMAP, RemapTable
    if cfg.label_remap == "none":
        return None
    path = BUNDLED_REMAP if cfg.label_remap == "kitti" else cfg.label_remap
    return RemapTable.load(path)


def _dataset(cfg: RunConfig):
    """Clouds from a scan directory, or synthetic scenes when no data_dir."""
    from .kitti_io import read_kitti_scan, scan_pairs_in_dir, scan_to_cloud
    from .tensor import RngState
    from .training import SceneSpec, synth_scene
    if cfg.data_dir is not None:
        remap = _load_remap(cfg)
        clouds = []
        for scan_path, label_path in scan_pairs_in_dir(cfg.data_dir):
            scan = read_kitti_scan(scan_path, label_path)
            clouds.append(scan_to_cloud(scan, remap=remap, with_remission=cfg.use_remission))
        return clouds
    spec = SceneSpec(n_points=cfg.synth_points, kind=cfg.scene_kind)
    rng = RngState(cfg.seed + 424242)
    return [synth_scene(rng.child(i), spec) for i in range(cfg.synth_scenes)]


def _class_names(cfg):
    from .training import CONTEXT_CLASS_NAMES, DEFAULT_CLASS_NAMES
    if cfg.data_dir is None:
        names = DEFAULT_CLASS_NAMES if cfg.scene_kind == "default" else CONTEXT_CLASS_NAMES
        if cfg.num_classes == len(names):
            return list(names)
    remap = _load_remap(cfg)
    if remap is not None and len(remap.class_names) == cfg.num_classes:
        return list(remap.class_names)
    return [f"class{i}" for i in range(cfg.num_classes)]


def _cmd_train(cfg: RunConfig):
    from .network import build_model, param_count, format_param_count, save_checkpoint
    from .tensor import RngState
    from .training import (class_weights_from_freq, dataset_class_histogram, train,
                           write_metrics_csv)
    clouds = _dataset(cfg)
    net_cfg = cfg.network_config()
    train_cfg = cfg.train_config()
    if cfg.class_weighting == "inverse_sqrt":
        train_cfg.class_weights = class_weights_from_freq(
            dataset_class_histogram(clouds, net_cfg.num_classes))
    elif cfg.class_weighting == "none":
        train_cfg.class_weights = np.ones(net_cfg.num_classes)
    else:
        raise ConfigError(f"unknown class_weighting '{cfg.class_weighting}'")
    model = build_model(net_cfg, RngState(cfg.seed))
    print(f"training on {len(clouds)} clouds, {format_param_count(param_count(model))} parameters")
    model, rows = train(model, clouds, train_cfg, RngState(cfg.seed + 1), net_cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = cfg.checkpoint or os.path.join(cfg.out_dir, "model.ckpt")
    save_checkpoint(ckpt, model)
    metrics = os.path.join(cfg.out_dir, "metrics.csv")
    write_metrics_csv(rows, metrics)
    last = rows[-1] if rows else None
    if last is not None:
        print(f"final: loss={last.loss:.4f} acc={last.acc:.4f} miou={last.miou:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    return EXIT_OK


def _require_checkpoint(cfg):
    if cfg.checkpoint is None:
        raise ConfigError("this command needs --checkpoint")
    from .network import load_checkpoint
    return load_checkpoint(cfg.checkpoint)


def _cmd_eval(cfg: RunConfig):
    from .tensor import RngState
    from .training import evaluate, miou
    model = _require_checkpoint(cfg)
    clouds = _dataset(cfg)
    cm = evaluate(model, clouds, model.config, rng=RngState(cfg.seed))
    iou, mean = miou(cm)
    names = _class_names(cfg)
    print(f"{'class':>5}  {'name':<14} {'iou':>8}")
    for i, value in enumerate(iou):
        shown = "absent" if np.isnan(value) else f"{value:.4f}"
        print(f"{i:>5}  {names[i]:<14} {shown:>8}")
    print(f"mIoU {mean:.3f}  accuracy {cm.accuracy():.3f}  points {cm.total}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_csv = os.path.join(cfg.out_dir, "eval.csv")
    with open(out_csv, "w", newline="") as fh:
        fh.write("class,name,iou\n")
        for i, value in enumerate(iou):
            fh.write(f"{i},{names[i]},{'' if np.isnan(value) else f'{value:.6f}'}\n")
        fh.write(f"mean,,{mean:.6f}\n")
    print(f"eval csv: {out_csv}")
    return EXIT_OK


def _cmd_infer(cfg: RunConfig, scan_path, out_path):
    from .kitti_io import read_kitti_scan, scan_to_cloud, write_labels
    from .network import infer
    from .tensor import RngState
    model = _require_checkpoint(cfg)
    scan = read_kitti_scan(scan_path)
    cloud = scan_to_cloud(scan, remap=None, with_remission=model.config.in_dim >= 4)
    predictions = infer(cloud, model, model.config, rng=RngState(cfg.seed))
    remap = _load_remap(cfg)
    out_labels = remap.invert(predictions) if remap is not None else predictions.astype(np.uint32)
    if out_path is None:
        stem = os.path.splitext(os.path.basename(scan_path))[0]
        os.makedirs(cfg.out_dir, exist_ok=True)
        out_path = os.path.join(cfg.out_dir, stem + ".label")
    write_labels(out_path, out_labels)
    print(f"wrote {out_labels.size} labels ({out_labels.size * 4} bytes) to {out_path}")
    return EXIT_OK


def _cmd_bench(cfg: RunConfig):
    from .global_encoder import bench_attention, fit_loglog_slope, write_bench_csv
    rows = bench_attention(cfg.bench_sizes, p=cfg.attention_points,
                           repeats=cfg.bench_repeats, dim=cfg.bench_dim,
                           heads=cfg.bench_heads, seed=cfg.seed, block=cfg.bench_block)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_csv = os.path.join(cfg.out_dir, "bench_attention.csv")
    write_bench_csv(rows, out_csv)
    for r in rows:
        print(f"n={r.n:<8} {r.method:<5} median={r.median_seconds:.6f}s reps={r.reps}")
    for method in ("avg", "full"):
        print(f"log-log slope [{method}]: {fit_loglog_slope(rows, method):.3f}")
    print(f"bench csv: {out_csv}")
    return EXIT_OK


def _cmd_grad_check(cfg: RunConfig, seeds):
    from .gradsuite import run_suite
    seed_list = tuple(int(s) for s in str(seeds).split(","))
    results = run_suite(seeds=seed_list, include_forward=True)
    failures = 0
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name} max_rel={report.max_rel_err:.3e}")
        if not report.passed:
            failures += 1
            print(report)
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    if failures:
        raise AcceptanceFailure(f"{failures} gradient checks failed")
    return EXIT_OK


class AcceptanceFailure(Exception):
    pass


def _cmd_synth(cfg: RunConfig):
    from .kitti_io import cloud_to_scan, write_kitti_scan, write_labels
    from .tensor import RngState
    from .training import SceneSpec, synth_scene
    os.makedirs(cfg.out_dir, exist_ok=True)
    spec = SceneSpec(n_points=cfg.synth_points, kind=cfg.scene_kind)
    rng = RngState(cfg.seed + 424242)
    for i in range(cfg.synth_scenes):
        cloud = synth_scene(rng.child(i), spec)
        scan = cloud_to_scan(cloud)
        stem = os.path.join(cfg.out_dir, f"scene_{i:04d}")
        write_kitti_scan(stem + ".bin", scan.points)
        write_labels(stem + ".label", scan.labels)
    print(f"wrote {cfg.synth_scenes} scenes ({cfg.synth_points} points each) to {cfg.out_dir}")
    return EXIT_OK


def _fail(code, category, message):
    print(f"error[{code}] {category}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from_args(args)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg)
        if args.command == "infer":
            return _cmd_infer(cfg, args.scan, args.out)
        if args.command == "bench-attention":
            return _cmd_bench(cfg)
        if args.command == "grad-check":
            return _cmd_grad_check(cfg, args.seeds)
        if args.command == "synth":
            return _cmd_synth(cfg)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except DataFormatError as exc:
        return _fail(EXIT_DATA, "data-format", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_DATA, "data-format", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except AcceptanceFailure as exc:
        return _fail(EXIT_ACCEPTANCE, "acceptance", exc)


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
