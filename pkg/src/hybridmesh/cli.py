"""``hybridmesh`` command line: generate, train, predict, evaluate, quality, plot.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError
from .config import ConfigError, load_config, with_overrides
from .data import DatasetError, PhantomDataset, generate_phantom_dataset, worker_count
from .data.dataset import PHASES
from .data.templates import load_template
from .evaluation import (
    QualityReport, evaluate_predictions, histogram, quality_rows, tetra_quality, write_evaluation, write_quality_csv,
)
from .mesh.io import MeshFormatError, read_tetgen, write_ply, write_tetgen
from .plotting import plot_run_dir
from .train import ResumeError, Trainer, load_trained, predict_mm, to_network

log = logging.getLogger("hybridmesh")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for data errors here
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    manifest = generate_phantom_dataset(args.out, args.count, args.seed, args.template, args.force, args.workers)
    ds = PhantomDataset.open(args.out)
    splits = ", ".join(f"{k} {len(v)}" for k, v in manifest["splits"].items())
    print(f"wrote {manifest['count']} subjects ({manifest['count'] * len(PHASES)} samples) to {args.out}")
    print(f"template {manifest['template']} ({manifest['n_vertices']} vertices), seed {manifest['seed']}")
    print(f"splits: {splits}")
    print(f"dataset hash {ds.dataset_hash()}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides: dict = {}
    if args.mode:
        overrides["model"] = {"mode": {"single": "single_view", "multi": "multi_view"}[args.mode]}
    if args.data:
        overrides["data"] = {"path": args.data}
    if args.out:
        overrides["run"] = {"out": args.out}
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    if not cfg.data.path:
        raise ConfigError("[data] path is not set (use the config file or --data)")
    if not Path(cfg.data.path).is_dir():
        raise ConfigError(f"[data] path {cfg.data.path} does not exist")
    trainer = Trainer(cfg, cfg.run.out, workers=worker_count(cfg.data.workers))
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.run()
    print(f"trained {result.steps} steps ({result.epochs} epochs) in {result.seconds:.1f} s")
    if result.val_mse is not None:
        print(f"validation MSE (relative space) {result.val_mse:.4e}")
    print(f"run directory {result.run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- predict / evaluate


def _open_for_checkpoint(meta: dict, data: str | None) -> PhantomDataset:
    root = data or meta["config"]["data"]["path"]
    if not root:
        raise DatasetError("no dataset: the checkpoint records none and --data was not given")
    ds = PhantomDataset.open(root)
    if ds.template_kind != meta["template"]:
        raise DatasetError(
            f"dataset template {ds.template_kind!r} does not match the checkpoint's {meta['template']!r} topology"
        )
    return ds


def _write_mesh(path_stem: Path, coords: np.ndarray, kind: str) -> Path:
    if kind == "surface":
        path = path_stem.with_suffix(".ply")
        write_ply(path, coords, load_template("surface").topology.faces)
        return path
    write_tetgen(path_stem, coords, load_template("tetra").topology.tetras)
    return path_stem.with_suffix(".node")


def cmd_predict(args) -> int:
    model, cfg, meta = load_trained(args.checkpoint)
    ds = _open_for_checkpoint(meta, args.data)
    if args.subject not in ds.manifest["subjects"]:
        raise DatasetError(f"subject {args.subject!r} is not in {ds.root}")
    phases = PHASES if args.phase == "both" else (args.phase,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for phase in phases:
        sample = to_network(ds.load(args.subject, phase), cfg)
        predict_mm(model, [sample])  # warm-up: operator caches and allocator
        t0 = time.perf_counter()
        coords = predict_mm(model, [sample])[0]
        elapsed = time.perf_counter() - t0
        path = _write_mesh(out / f"{args.subject}_{phase}", coords, meta["template"])
        print(f"{args.subject} {phase}: {len(coords)} vertices -> {path}  (forward pass {elapsed:.3f} s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, cfg, meta = load_trained(args.checkpoint)
    ds = _open_for_checkpoint(meta, args.data)
    workers = worker_count(args.workers)
    samples = [to_network(s, cfg) for s in ds.load_split(args.split, workers)]
    if not samples:
        raise DatasetError(f"split {args.split!r} is empty")
    preds = predict_mm(model, samples, cfg.optimizer.batch_size)
    topo = load_template(meta["template"]).topology
    result = evaluate_predictions(samples, preds, topo, workers)
    extra = {"checkpoint": str(args.checkpoint), "split": args.split, "n_samples": len(samples),
             "dataset_hash": ds.dataset_hash(), "seed": meta["seed"], "config": meta["config"]}
    write_evaluation(args.out, result, extra)
    (Path(args.out) / "config.json").write_text(json.dumps(meta["config"], indent=1, sort_keys=True) + "\n")
    if "sj_histogram" in result:
        _write_histogram_csv(Path(args.out) / "sj_histogram.csv", result["sj_histogram"]["counts"],
                             result["sj_histogram"]["edges"])
    s = result["summary"]["all"]["mae_mm"]
    print(f"{len(samples)} samples from split {args.split}: vertex MAE {s['mean']:.3f} mm (sd {s['std']:.3f})")
    for name in ("LV_endo", "LV_myo", "RV"):
        if name in result["summary"]:
            print(f"  {name}: Dice {result['summary'][name]['dice']['mean']:.3f}  HD {result['summary'][name]['hd_mm']['mean']:.2f} mm")
    if "quality" in result:
        print(f"  scaled Jacobian mean {result['quality']['scaled_jacobian']['mean']:.3f}")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- quality


def _write_histogram_csv(path: Path, counts, edges) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{a:g}", f"{b:g}", int(c)])


def _mesh_stems(args) -> list[Path]:
    if args.mesh:
        p = Path(args.mesh)
        stem = p.with_suffix("") if p.suffix in (".node", ".ele") else p
        if not stem.with_suffix(".node").is_file():
            raise DatasetError(f"{stem}.node does not exist")
        return [stem]
    d = Path(args.dir)
    if not d.is_dir():
        raise DatasetError(f"{d} is not a directory")
    stems = sorted(p.with_suffix("") for p in d.rglob("*.node") if p.with_suffix(".ele").is_file())
    if not stems:
        raise DatasetError(f"{d}: no .node/.ele meshes found")
    return stems


def cmd_quality(args) -> int:
    stems = _mesh_stems(args)
    reports, per_mesh = [], []
    for stem in stems:
        coords, tetras = read_tetgen(stem)
        q = tetra_quality(coords, tetras)
        reports.append(q)
        per_mesh.append({"mesh": str(stem), "elements": q.n_elements, "degenerate": q.degenerate,
                         **{f"sj_{k}": v for k, v in q.summary["scaled_jacobian"].items()}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        pooled = reports[0]
    else:
        pooled = QualityReport({k: np.concatenate([r.per_element[k] for r in reports]) for k in reports[0].per_element},
                               sum(r.degenerate for r in reports))
    write_quality_csv(out / "quality.csv", quality_rows(pooled))
    with (out / "per_mesh.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, list(per_mesh[0]))
        w.writeheader()
        w.writerows(per_mesh)
    counts, edges = histogram(pooled.per_element["scaled_jacobian"])
    _write_histogram_csv(out / "sj_histogram.csv", counts, edges)
    sj = pooled.summary["scaled_jacobian"]
    print(f"{len(stems)} mesh(es), {pooled.n_elements} elements, {pooled.degenerate} degenerate")
    print(f"scaled Jacobian mean {sj['mean']:.4f} std {sj['std']:.4f} min {sj['min']:.4f} max {sj['max']:.4f}")
    print(f"wrote {out / 'quality.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- plot


def cmd_plot(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise DatasetError(f"{run} is not a directory")
    written = plot_run_dir(run)
    if not written:
        raise DatasetError(f"{run}: nothing to plot (no train_log.csv, val_curve.csv or sj_histogram.csv)")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridmesh", description="Image-to-mesh cardiac reconstruction on procedural phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a phantom dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--template", choices=("surface", "tetra"), default="surface")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.add_argument("--workers", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=("single", "multi"))
    t.add_argument("--resume", help="checkpoint file or run directory to continue from")
    t.add_argument("--data", help="dataset directory (overrides [data] path)")
    t.add_argument("--out", help="run directory (overrides [run] out)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict a mesh for one subject")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--subject", required=True)
    pr.add_argument("--phase", choices=("ED", "ES", "both"), default="both")
    pr.add_argument("--data")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=None)
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("quality", help="tetrahedral element quality report")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", help=".node/.ele stem or either file")
    src.add_argument("--dir", help="directory searched recursively for .node/.ele pairs")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quality)

    pl = sub.add_parser("plot", help="render SVG figures for a run directory")
    pl.add_argument("--run-dir", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hybridmesh: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ResumeError, CheckpointError, MeshFormatError, ValueError, OSError) as exc:
        print(f"hybridmesh: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
