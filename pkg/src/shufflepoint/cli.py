"""Command-line entry point: ``shufflepoint <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 verification failure.  ``SPN_LOG`` sets the log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .complexity import measure_forward_time, model_complexity, sweep_groups
from .errors import ConfigurationError, DimensionError, InputError, TrainingError, VerificationError
from .geometry import PointCloud, knn_search, normalize_unit_sphere
from .io import (load_checkpoint, read_cloud_dir, save_checkpoint, write_binary_cloud,
                 write_text_cloud)
from .model import build_model, default_config
from .rng import stream
from .tensor import inject_gradient_fault
from .training import (SYNTH_CLASSES, SYNTH_PART_SETS, CloudDataset, TrainConfig, evaluate,
                       predict, split_dataset, synth_dataset, train)

log = logging.getLogger("shufflepoint")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p, model=True, data=False):
    p.add_argument("--seed", type=int, default=42, help="seed for every random stream (default 42)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--threads", type=_positive, default=1, help="BLAS threads (default 1)")
    if model:
        p.add_argument("--groups", type=_positive, default=2, help="group count g for SGC layers")
        p.add_argument("--k", type=_positive, default=16, help="neighbors per point, first stage")
        p.add_argument("--points", type=_positive, default=256, help="points per cloud")
        p.add_argument("--edge-variant", choices=("a", "b", "c"), default="a",
                       help="a: (x_i, x_i - x_j), b: (x_i, x_j), c: (x_i, x_j, x_i - x_j)")
        p.add_argument("--neighbor", choices=("knn", "radius"), default="knn")
        p.add_argument("--radius", type=float, default=0.25,
                       help="first-stage ball radius for --neighbor radius (doubles per stage)")
    if data:
        p.add_argument("--synth", action="store_true", help="use the generated 4-class dataset")
        p.add_argument("--data", type=Path, default=None, help="directory of .spnc/.txt clouds")
        p.add_argument("--per-class", type=_positive, default=200,
                       help="synthetic clouds per class (default 200)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shufflepoint", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a classifier")
    _common(t, data=True)
    t.add_argument("--epochs", type=_positive, default=30)
    t.add_argument("--batch", type=_positive, default=32)
    t.add_argument("--precision", choices=("float32", "float64"), default="float32")

    s = sub.add_parser("segment", help="train a part segmenter, or label clouds with --checkpoint")
    _common(s, data=True)
    s.add_argument("--epochs", type=_positive, default=30)
    s.add_argument("--batch", type=_positive, default=32)
    s.add_argument("--precision", choices=("float32", "float64"), default="float32")
    s.add_argument("--checkpoint", type=Path, default=None,
                   help="trained segmenter; writes per-point labels for --data clouds")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(e, model=False, data=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--points", type=_positive, default=None)

    c = sub.add_parser("complexity", help="analytic params/FLOPs report")
    _common(c)
    c.add_argument("--kind", choices=("classifier", "segmenter"), default="classifier")
    c.add_argument("--sweep-groups", type=_int_list, default=None, metavar="LIST",
                   help="comma-separated group counts, e.g. 1,2,4,8")
    c.add_argument("--trials", type=int, default=0, help="also time this many forward passes")

    g = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    _common(g, model=False)
    g.add_argument("--inject-fault", default=None, metavar="OP",
                   help="negate the gradient of OP (to see a failure reported)")
    g.add_argument("--no-model", action="store_true", help="skip the small end-to-end model")

    b = sub.add_parser("bench-knn", help="brute-force vs kd-tree k-NN, agreement then timing")
    _common(b, model=False)
    b.add_argument("--k", type=_positive, default=20)
    b.add_argument("--sizes", type=_int_list, default=[1000, 4000, 16000], metavar="LIST")

    y = sub.add_parser("synth", help="write the synthetic dataset as binary clouds")
    _common(y, model=False)
    y.add_argument("--points", type=_positive, default=256)
    y.add_argument("--per-class", type=_positive, default=200)
    y.add_argument("--part-labels", action="store_true",
                   help="store per-point part labels instead of the cloud label")
    return p


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _model_config(args, n_classes: int, in_channels: int = 3):
    cfg = default_config(n_classes=n_classes, g=args.groups, edge_variant=args.edge_variant,
                         neighbor=args.neighbor, in_channels=in_channels, n_points=args.points,
                         k=args.k)
    cfg.radius = args.radius
    return cfg.validate()


def _load_dataset(args, segmentation: bool = False) -> CloudDataset:
    if args.synth == (args.data is not None):
        raise UsageError("give exactly one of --synth or --data PATH")
    if args.synth:
        ds = synth_dataset(args.per_class, args.points, args.seed)
        if not segmentation:
            ds.part_labels = None
        return ds
    clouds = read_cloud_dir(args.data, labels="point" if segmentation else "cloud")
    return CloudDataset.from_clouds(clouds, args.points, args.seed)


def _fit(args, task: str) -> int:
    seg = task == "segmentation"
    ds = _load_dataset(args, seg)
    tr, te = split_dataset(ds, 0.2, args.seed)
    n_out = ds.n_parts if seg else ds.n_classes
    cfg = _model_config(args, n_out, ds.points.shape[-1])
    model = build_model("segmenter" if seg else "classifier", cfg, args.seed)
    out = _out_dir(args, "run")
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            print(f"epoch {entry['epoch']:3d}  lr {entry['lr']:.6f}  bn {entry['bn_momentum']:.4f}  "
                  f"loss {entry['train_loss']:.4f}  train {entry['train_acc']:.3f}  "
                  f"eval {entry['eval_acc']:.3f}  {entry['wall_ms'] / 1e3:.1f}s")

        tcfg = TrainConfig(batch_size=args.batch, task=task, precision=args.precision)
        result = train(model, tr, args.epochs, tcfg, args.seed, te, on_epoch)
    save_checkpoint(out / "model.spnm", model)
    metrics = result.metrics.to_dict()
    metrics.update(n_train=len(tr), n_test=len(te), epochs=args.epochs, seed=args.seed)
    _write_json(out / "metrics.json", metrics)
    _print_metrics(result.metrics.to_dict(), seg)
    print(f"wrote {out / 'model.spnm'}, {log_path}, {out / 'metrics.json'}")
    return EXIT_OK


def _print_metrics(m: dict, seg: bool) -> None:
    line = f"overall accuracy {m['overall_accuracy']:.4f}  mean class accuracy {m['mean_class_accuracy']:.4f}"
    if seg and m.get("miou") is not None:
        line += f"  mIoU {m['miou']:.4f}"
    print(line)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    return _fit(args, "classification")


def cmd_segment(args) -> int:
    if args.checkpoint is None:
        return _fit(args, "segmentation")
    if args.data is None:
        raise UsageError("labelling with --checkpoint needs --data PATH")
    model = load_checkpoint(args.checkpoint)
    if model.kind != "segmenter":
        raise ConfigurationError(f"{args.checkpoint} holds a {model.kind}, not a segmenter")
    out = _out_dir(args, "labels")
    paths = sorted(p for p in args.data.iterdir() if p.suffix in (".spnc", ".txt", ".xyz")) \
        if args.data.is_dir() else [args.data]
    clouds = read_cloud_dir(args.data, labels="none")
    for path, cloud in zip(paths, clouds):
        pts = normalize_unit_sphere(cloud.data)
        labels = predict(model, pts[None])[0].argmax(axis=-1)
        write_text_cloud(out / f"{path.stem}.txt", PointCloud(cloud.data, labels))
    print(f"labelled {len(clouds)} clouds into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    seg = model.kind == "segmenter"
    if args.points is None:
        args.points = 256
    ds = _load_dataset(args, seg)
    if args.synth:
        ds = split_dataset(ds, 0.2, args.seed)[1]
    m = evaluate(model, ds, "segmentation" if seg else "classification")
    _print_metrics(m.to_dict(), seg)
    if args.out is not None:
        _write_json(_out_dir(args, "eval") / "metrics.json", m.to_dict())
    return EXIT_OK


def cmd_complexity(args) -> int:
    cfg = _model_config(args, 4)
    dims = (args.points, 3)
    if args.sweep_groups:
        reports = sweep_groups(cfg, args.sweep_groups, dims, args.kind)
        rows = [{"g": g, "params": r.params, "flops": r.flops, "grouped_flops": r.grouped_flops,
                 "other_ops": r.other_ops} for g, r in reports]
        lines = [f"{'g':>3}  {'params':>10}  {'flops':>13}  {'grouped-layer flops':>20}"]
        lines += [f"{r['g']:>3}  {r['params']:>10}  {r['flops']:>13}  {r['grouped_flops']:>20}"
                  for r in rows]
        text = "\n".join(lines)
        payload = {"input_dims": list(dims), "kind": args.kind, "sweep": rows,
                   "reports": {str(g): r.to_dict() for g, r in reports}}
    else:
        report = model_complexity(cfg, dims, args.kind)
        if args.trials:
            model = build_model(args.kind, cfg, args.seed)
            cloud = stream(args.seed, "bench").normal(size=(1, args.points, 3))
            report.forward_time_ms = measure_forward_time(model, cloud, args.trials).to_dict()
        text = report.to_table()
        payload = report.to_dict()
    print(text)
    if args.out is not None:
        out = _out_dir(args, "complexity")
        _write_json(out / "complexity.json", payload)
        (out / "complexity.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import format_results, run_gradcheck

    t0 = time.perf_counter()
    if args.inject_fault:
        with inject_gradient_fault(args.inject_fault):
            results = run_gradcheck(args.seed, not args.no_model)
    else:
        results = run_gradcheck(args.seed, not args.no_model)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - t0:.1f}s")
    if failed:
        for r in failed:
            print(f"failure: {r.op} [{r.wrt}] worst coordinate {r.worst}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_bench_knn(args) -> int:
    rng = stream(args.seed, "bench")
    rows = []
    for n in args.sizes:
        if args.k >= n:
            raise ConfigurationError(f"k={args.k} needs more than {n} points")
        pts = rng.uniform(-1, 1, size=(n, 3))
        brute = knn_search(pts, args.k, method="brute").indices
        tree = knn_search(pts, args.k, method="kdtree").indices
        if not np.array_equal(brute, tree):
            bad = int(np.flatnonzero((brute != tree).any(axis=1))[0])
            raise VerificationError(f"N={n}: kd-tree and brute-force disagree at row {bad}")
        times = {}
        for method in ("brute", "kdtree"):
            t0 = time.perf_counter()
            knn_search(pts, args.k, method=method)
            times[method] = (time.perf_counter() - t0) * 1e3
        rows.append({"n": n, "k": args.k, "agree": True, "brute_ms": times["brute"],
                     "kdtree_ms": times["kdtree"]})
    print(f"{'N':>6}  {'k':>3}  agree  {'brute ms':>10}  {'kd-tree ms':>10}")
    for r in rows:
        print(f"{r['n']:>6}  {r['k']:>3}  {'yes':>5}  {r['brute_ms']:>10.1f}  {r['kdtree_ms']:>10.1f}")
    if args.out is not None:
        _write_json(_out_dir(args, "bench") / "bench_knn.json", rows)
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_dataset(args.per_class, args.points, args.seed)
    out = _out_dir(args, "synth")
    clouds = ds.clouds(per_point=args.part_labels)
    width = len(str(len(clouds) - 1))
    files = []
    for i, (cloud, label) in enumerate(zip(clouds, ds.labels)):
        name = f"{i:0{width}d}_{SYNTH_CLASSES[label]}.spnc"
        write_binary_cloud(out / name, cloud)
        files.append({"file": name, "label": int(label)})
    _write_json(out / "manifest.json", {
        "classes": list(SYNTH_CLASSES), "seed": args.seed, "points": args.points,
        "per_class": args.per_class, "labels": "point" if args.part_labels else "cloud",
        "part_sets": {str(k): list(v) for k, v in SYNTH_PART_SETS.items()}, "files": files})
    print(f"wrote {len(files)} clouds to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "segment": cmd_segment, "eval": cmd_eval,
            "complexity": cmd_complexity, "gradcheck": cmd_gradcheck,
            "bench-knn": cmd_bench_knn, "synth": cmd_synth}


def main(argv=None) -> int:
    level = os.environ.get("SPN_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, DimensionError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, InputError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
