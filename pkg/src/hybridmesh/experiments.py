"""Closed-loop phantom experiments: train a configuration, then score it on a
held-out split. Used by the acceptance suite and handy from a REPL."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PRESETS, RunConfig, with_overrides
from .data import PhantomDataset
from .data.templates import load_template
from .evaluation import evaluate_predictions, write_evaluation
from .plotting import plot_run_dir, read_csv_columns
from .train import Trainer, load_trained, predict_mm, to_network

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    name: str
    run_dir: Path
    mae_mm: float  # mean over held-out samples of per-sample vertex MAE
    sj_mean: float | None  # mean scaled Jacobian over every predicted element (volumetric only)
    bbox_diagonal_mm: float  # mean gt bounding-box diagonal over the same samples
    train_seconds: float
    summary: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "run_dir": str(self.run_dir), "mae_mm": self.mae_mm, "sj_mean": self.sj_mean,
                "bbox_diagonal_mm": self.bbox_diagonal_mm, "train_seconds": self.train_seconds}


def experiment_config(dataset: PhantomDataset, out, preset: str = "phantom-fast", **sections) -> RunConfig:
    cfg = with_overrides(PRESETS[preset], data={"path": str(dataset.root)}, run={"out": str(out)})
    return with_overrides(cfg, **sections) if sections else cfg


def run_experiment(name: str, cfg: RunConfig, dataset: PhantomDataset, split: str = "test",
                   workers: int = 1) -> ExperimentResult:
    """Train ``cfg`` into ``cfg.run.out`` (continuing from any checkpoint already
    there) and evaluate the final weights on ``split``."""
    out = Path(cfg.run.out)
    trainer = Trainer(cfg, out, dataset, workers=workers)
    if (out / "checkpoints").is_dir() and any((out / "checkpoints").glob("epoch_*.ckpt")):
        trainer.resume(out)
    t0 = time.perf_counter()
    trainer.run()
    seconds = time.perf_counter() - t0 + _previous_seconds(out)
    (out / "timing.json").write_text(json.dumps({"train_seconds": seconds}) + "\n")

    model, cfg2, meta = load_trained(out)
    samples = [to_network(s, cfg2) for s in dataset.load_split(split, workers)]
    preds = predict_mm(model, samples, cfg2.optimizer.batch_size)
    result = evaluate_predictions(samples, preds, load_template(meta["template"]).topology, workers)
    write_evaluation(out / f"eval_{split}", result, {"split": split, "seed": meta["seed"]})
    if "sj_histogram" in result:
        h = result["sj_histogram"]
        with (out / f"eval_{split}" / "sj_histogram.csv").open("w") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for a, b, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                fh.write(f"{a:g},{b:g},{c}\n")
    plot_run_dir(out)
    diag = float(np.mean([np.linalg.norm(np.ptp(s.gt.coords, axis=0)) for s in samples]))
    sj = result["quality"]["scaled_jacobian"]["mean"] if "quality" in result else None
    res = ExperimentResult(name, out, result["summary"]["all"]["mae_mm"]["mean"], sj, diag, seconds, result["summary"])
    (out / "experiment.json").write_text(json.dumps(res.to_dict(), indent=1) + "\n")
    log.info("%s: MAE %.3f mm, SJ %s, %.0f s", name, res.mae_mm, sj, seconds)
    return res


def _previous_seconds(out: Path) -> float:
    """Training time already spent before a resume (0 for a fresh run)."""
    p = out / "timing.json"
    return float(json.loads(p.read_text())["train_seconds"]) if p.is_file() else 0.0


def epoch_means(run_dir, column: str = "total") -> np.ndarray:
    """Per-epoch mean of a training-log column."""
    t = read_csv_columns(Path(run_dir) / "train_log.csv")
    epochs = t["epoch"].astype(int)
    return np.array([t[column][epochs == e].mean() for e in np.unique(epochs)])


def smoothed_monotone(values, window: int = 5, rel_tol: float = 0.0) -> tuple[bool, np.ndarray]:
    """Whether a trailing ``window`` moving average never increases (beyond ``rel_tol``)."""
    v = np.asarray(values, float)
    if v.size < window:
        return False, v
    s = np.convolve(v, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(s) <= rel_tol * np.abs(s[:-1]))), s
