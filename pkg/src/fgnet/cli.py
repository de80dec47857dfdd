"""``fgnet`` command line: filter, sample, train, eval, gradcheck, bench, diag.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import statistics
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError, parse_key_values
from .data import DataError, read_cloud, toy_scene, write_cloud
from .filtering import FilterParams, filter_cloud
from .geometry import GeometryError, PointCloud
from .metrics import evaluate
from .network import ConfigError, FGNet, NetworkConfig, export_attention_row, reduced_config
from .sampling import SamplingError, build_plan, farthest_point_sample, random_sample
from .training import (Diverged, NonFiniteGradient, TrainConfig, TrainingError,
                       gradcheck_instance, gradcheck_network, gradcheck_ops, train, training_accuracy)

log = logging.getLogger("fgnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config handling ------------------------------------------------------------


def _train_fields() -> set[str]:
    return {f.name for f in dataclasses.fields(TrainConfig)}


def load_config(path: str | None, overrides: list[str]) -> tuple[dict[str, str], dict[str, str]]:
    """Split flat key=value settings into (network, training) dicts.

    File values come first; ``--set key=value`` overrides win. Keys that
    belong to neither config are rejected.
    """
    values: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_key_values(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    net_keys, train_keys = NetworkConfig.field_names(), _train_fields()
    net, tr = {}, {}
    for k, v in values.items():
        if k not in net_keys and k not in train_keys:
            raise UsageError(f"unknown config key {k!r}")
        if k in net_keys:
            net[k] = v
        if k in train_keys:
            tr[k] = v
    return net, tr


def _coerce_train(values: dict[str, str]) -> dict:
    out = {}
    defaults = TrainConfig()
    for k, raw in values.items():
        ref = getattr(defaults, k)
        try:
            if isinstance(ref, bool):
                if raw.lower() not in ("1", "true", "yes", "0", "false", "no"):
                    raise ValueError(raw)
                out[k] = raw.lower() in ("1", "true", "yes")
            elif isinstance(ref, int):
                out[k] = int(raw)
            else:
                out[k] = float(raw)
        except ValueError:
            raise UsageError(f"bad value for {k}: {raw!r}") from None
    return out


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"sizes must be a comma-separated list of integers, got {text!r}") from None
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise UsageError(f"sizes must be positive and ascending, got {text!r}")
    return sizes


def _load_dataset(specs: list[str], seed: int) -> list[PointCloud]:
    """Each entry is a cloud file or ``toy[:N]`` for the synthetic scene."""
    out = []
    for spec in specs:
        if spec.startswith("toy"):
            n = int(spec.split(":", 1)[1]) if ":" in spec else 4096
            out.append(toy_scene(n, seed))
        else:
            out.append(read_cloud(spec))
    return out


# -- subcommands -------------------------------------------------------------------


def cmd_filter(args) -> int:
    cloud = read_cloud(args.input)
    kept, report = filter_cloud(cloud, FilterParams(args.radius, args.min_neighbors, args.sigma))
    write_cloud(args.output, kept)
    text = report.summary()
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    cloud = read_cloud(args.input)
    counts = _sizes_desc(args.counts)
    plan = build_plan(cloud, counts, args.mode, args.seed)
    stage = len(plan.stages) - 1 if args.stage is None else args.stage
    if not 0 <= stage < len(plan.stages):
        raise UsageError(f"stage {stage} outside [0, {len(plan.stages) - 1}]")
    write_cloud(args.output, cloud.subset(plan.global_indices(stage)))
    print(f"{args.mode} counts {plan.counts} -> wrote stage {stage} ({plan.counts[stage]} points)")
    return EXIT_OK


def _sizes_desc(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"counts must be integers, got {text!r}") from None


def cmd_train(args) -> int:
    net_vals, train_vals = load_config(args.config, args.set or [])
    train_kw = _coerce_train(train_vals)
    for key in ("epochs", "lr", "seed"):
        v = getattr(args, key)
        if v is not None:
            train_kw[key] = v
    net_kw = NetworkConfig.coerce(net_vals)
    if args.seed is not None:
        net_kw["seed"] = args.seed
    if args.rowwise_softmax:
        net_kw["rowwise_softmax"] = True
    tcfg = TrainConfig(**train_kw)
    dataset = _load_dataset(args.data, tcfg.seed)
    if args.reduced:
        base = dataclasses.asdict(reduced_config(num_classes=net_kw.get("num_classes", 3),
                                                 in_features=dataset[0].feature_dim))
        base.update(net_kw)
        net_kw = base
    ncfg = NetworkConfig(**net_kw)
    result = train(dataset, ncfg, tcfg, args.out)
    if result.history:
        print(f"final total loss {result.history[-1].total:.6g}")
        acc = training_accuracy(result.net, dataset[0], tcfg.seed)
        print(f"training accuracy (scene 0) {acc:.4f}")
    print(f"checkpoint {result.checkpoint}")
    print(f"losses {result.csv_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    truth = read_cloud(args.truth)
    if truth.labels is None:
        raise DataError(f"{args.truth}: no label column")
    if args.pred:
        pred_cloud = read_cloud(args.pred)
        if pred_cloud.labels is None:
            raise DataError(f"{args.pred}: no label column")
        pred = pred_cloud.labels
    elif args.checkpoint:
        net, _ = checkpoint.load(args.checkpoint)
        pred = net.predict(net.prepare(truth, args.seed))
    else:
        raise UsageError("eval needs --pred or --checkpoint")
    classes = args.classes
    if classes is None:
        classes = int(max(truth.labels.max(initial=0), np.max(pred, initial=0))) + 1
    report = evaluate(pred, truth.labels, classes, args.ignore_label)
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = gradcheck_ops(args.seed, args.step)
    net, batch = gradcheck_instance(args.seed, args.points)
    full = gradcheck_network(net, batch, args.step, args.threshold)
    print("# per-op")
    print(ops.to_text(), end="")
    print("# network")
    print(full.to_text(), end="")
    if args.out:
        Path(args.out).write_text(ops.to_text() + full.to_text())
    if not (ops.passed and full.passed):
        raise NumericFailure("gradient check failed")
    return EXIT_OK


# -- bench ---------------------------------------------------------------------------


def _synthetic(n: int, seed: int) -> PointCloud:
    """Uniform points in a cube whose side grows with n (constant density)."""
    rng = np.random.default_rng([seed, n])
    side = (n / 1000.0) ** (1 / 3)
    return PointCloud(rng.uniform(0, side, size=(n, 3)))


def _measure(fn, repeats: int) -> tuple[float, int]:
    fn()  # warm-up, excluded
    times, peaks = [], []
    for _ in range(repeats):
        tracemalloc.start()
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    return statistics.median(times), int(statistics.median(peaks))


def bench_rows(suite: str, sizes: list[int], seed: int = 0, repeats: int = 5, method: str | None = None):
    """(method, size, seconds, peak_bytes) rows; timings are medians over ``repeats``."""
    rows = []
    for n in sizes:
        cloud = _synthetic(n, seed)
        if suite == "filter":
            jobs = {"filter": lambda: filter_cloud(cloud, FilterParams(0.2, 4, 2.0))}
        elif suite == "sampling":
            count = max(n // 4, 1)
            jobs = {"rs": lambda: random_sample(n, count, seed),
                    "fps": lambda: farthest_point_sample(cloud.coords, count)}
            if method:
                jobs = {method: jobs[method]}
        elif suite == "inference":
            net = FGNet(reduced_config(num_classes=3, seed=seed))
            jobs = {"inference": lambda: net.predict(net.prepare(cloud, seed))}
        else:
            raise UsageError(f"unknown bench suite {suite!r}")
        for name, fn in jobs.items():
            sec, peak = _measure(fn, repeats)
            rows.append((name, n, sec, peak))
    return rows


def cmd_bench(args) -> int:
    sizes = _sizes(args.sizes)
    rows = bench_rows(args.suite, sizes, args.seed, args.repeats, args.method)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "size", "seconds", "peak_bytes", "points_per_second"])
    for name, n, sec, peak in rows:
        w.writerow([name, n, f"{sec:.6g}", peak, f"{n / sec:.6g}" if sec > 0 else "inf"])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# -- diag ------------------------------------------------------------------------------


def _diag_cloud(args, net: FGNet) -> PointCloud:
    if args.input:
        cloud = read_cloud(args.input)
    else:
        cloud = toy_scene(args.points, args.seed)
    if cloud.feature_dim != net.config.in_features:
        feats = np.zeros((len(cloud), net.config.in_features))
        cloud = PointCloud(cloud.coords, feats, cloud.labels, cloud.num_classes)
    return cloud


def _branch_magnitude(rows, n: int) -> np.ndarray:
    """Norm of the neighbor-summed branch output, one value per point."""
    if rows is None:
        return np.zeros(n)
    data = rows.data.reshape(n, -1, rows.cols).sum(axis=1)
    return np.linalg.norm(data, axis=1)


def cmd_diag(args) -> int:
    net, _ = checkpoint.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "kernels":
        layers = net.kernel_sets()
        names = [n for n, _ in layers]
        if args.layer is not None and args.layer not in names:
            raise UsageError(f"unknown layer {args.layer!r}; choose from {', '.join(names)}")
        for name, kernel in layers:
            if args.layer is not None and name != args.layer:
                continue
            pos = kernel.positions().data
            write_cloud(out / f"kernels_{name}.xyz", PointCloud(pos))
        print(f"wrote {len(layers) if args.layer is None else 1} kernel file(s) to {out}")
        return EXIT_OK
    cloud = _diag_cloud(args, net)
    batch = net.prepare(cloud, args.seed)
    if args.what == "attention":
        try:
            row = export_attention_row(net, batch, args.query)
        except IndexError as exc:
            raise UsageError(str(exc)) from None
        coarse = batch.stages[-1].coords
        path = out / f"attention_q{args.query}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "weight"])
            for p, v in zip(coarse, row):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))])
        print(f"wrote {len(row)} attention weights to {path}")
        return EXIT_OK
    # activations: per-point magnitude of the PFM and GCM branch outputs
    traces: list = []
    net.forward(batch, traces=traces)
    names = [n for n, _ in net.kernel_sets()]
    stage_of = [s for s, stage in enumerate(net.blocks) for _ in stage]
    if args.layer is not None and args.layer not in names:
        raise UsageError(f"unknown layer {args.layer!r}; choose from {', '.join(names)}")
    for name, s, (_, trace) in zip(names, stage_of, traces):
        if args.layer is not None and name != args.layer:
            continue
        coords = batch.stages[s].coords
        f1 = _branch_magnitude(trace.f1, len(coords))
        f2 = _branch_magnitude(trace.f2, len(coords))
        path = out / f"activations_{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "pfm", "gcm"])
            for p, a, b in zip(coords, f1, f2):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(a)), repr(float(b))])
    print(f"wrote activation files to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fgnet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker cap (sets FGNET_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("filter", help="remove isolated and statistical outlier points")
    p.add_argument("--in", "--input", dest="input", required=True, help="input cloud (.ply or .xyz)")
    p.add_argument("--out", "--output", dest="output", required=True, help="filtered cloud path")
    p.add_argument("--radius", type=float, required=True, help="ball radius r")
    p.add_argument("--min-neighbors", type=int, default=4, help="isolation threshold (default 4)")
    p.add_argument("--sigma-mult", "--sigma", dest="sigma", type=float, default=2.0,
                   help="statistical band multiplier (default 2)")
    p.add_argument("--report", help="also write the filter report to this file")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("sample", help="build a sampling plan and write one stage")
    p.add_argument("--in", "--input", dest="input", required=True, help="input cloud")
    p.add_argument("--out", "--output", dest="output", required=True, help="output cloud for the chosen stage")
    p.add_argument("--counts", required=True, help="comma-separated strictly decreasing counts")
    p.add_argument("--mode", default="igsam", choices=["igsam", "fps", "rs", "ids", "gss"])
    p.add_argument("--stage", type=int, default=None, help="stage to write (default: coarsest)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a network and write checkpoint + loss CSV")
    p.add_argument("--config", help="flat key=value file with network and training keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--data", nargs="+", required=True, help="labelled clouds, or toy[:N] for the synthetic scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reduced", action="store_true", help="start from the reduced-width 3-stage preset")
    p.add_argument("--rowwise-softmax", action="store_true", help="row-wise instead of full-matrix attention softmax")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU, mIoU and overall accuracy")
    p.add_argument("--truth", required=True, help="labelled ground-truth cloud")
    p.add_argument("--pred", help="cloud whose label column holds predictions")
    p.add_argument("--checkpoint", help="predict with this checkpoint instead of --pred")
    p.add_argument("--classes", type=int, default=None, help="number of classes (default: inferred)")
    p.add_argument("--ignore-label", type=int, default=None, help="truth label excluded from scoring")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=32, help="points in the tiny instance (<= 64)")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-3, help="end-to-end pass threshold")
    p.add_argument("--out", help="write the report here too")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall time and peak memory per input size")
    p.add_argument("--suite", required=True, choices=["filter", "sampling", "inference"])
    p.add_argument("--sizes", required=True, help="ascending comma-separated sizes, e.g. 1000,10000")
    p.add_argument("--method", choices=["rs", "fps"], default=None, help="sampling suite: one method only")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diag", help="dump kernels, attention rows or branch activations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", required=True, choices=["kernels", "attention", "activations"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer", default=None, help="restrict to one layer, e.g. stage0.block0")
    p.add_argument("--query", type=int, default=0, help="attention query row")
    p.add_argument("--input", default=None, help="cloud to run (default: synthetic toy scene)")
    p.add_argument("--points", type=int, default=1024, help="toy scene size when --input is absent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            os.environ["FGNET_THREADS"] = str(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, CheckpointError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, Diverged, NonFiniteGradient, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SamplingError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
