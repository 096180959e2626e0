"""Training loop: seeded augmentation, Adam with per-epoch decay, CSV logs and
per-epoch checkpoints that a later run can resume from."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, backward, load_checkpoint, lr_at_epoch, save_checkpoint
from .config import RunConfig
from .data import PhantomDataset, augment, pad_and_crop
from .data.sample import AugmentConfig, MultiViewSample
from .data.templates import load_template, template_hierarchy
from .data.transforms import to_mm
from .losses import ds_targets, total_loss
from .model import HybridVNet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "total", "recon", "kl", "ds1", "ds2", "ds3", "ds4", "reg")
VAL_COLUMNS = ("step", "epoch", "train_mse", "val_mse", "val_mae_mm")

# stream tags mixed into the run seed so the independent random streams never collide
_STEP_STREAM = 0xA06
_ORDER_STREAM = 0x0DE


class ResumeError(ValueError):
    pass


@dataclass
class Batch:
    sax: np.ndarray  # (B, 1, X, Y, Z)
    lax: list  # per view (B, 1, H, W)
    gt: np.ndarray  # (B, M, 3) relative
    samples: list  # network-space samples (carry the transforms)


def build_model(cfg: RunConfig, template_kind: str) -> HybridVNet:
    return HybridVNet(cfg.model_config(), template_hierarchy(template_kind, cfg.model.levels), seed=cfg.run.seed)


def to_network(sample: MultiViewSample, cfg: RunConfig, rng: np.random.Generator | None = None) -> MultiViewSample:
    """Pad or crop onto the network grid, augmenting first when ``rng`` is given."""
    if rng is not None:
        sample = augment(sample, rng, cfg.data.mode, cfg.grid(), AugmentConfig())
    return pad_and_crop(sample, cfg.data.mode, cfg.grid())


def make_batch(samples: list[MultiViewSample]) -> Batch:
    sax = np.stack([np.asarray(s.sax.data, np.float64) for s in samples])[:, None]
    n_views = len(samples[0].lax)
    lax = [np.stack([np.asarray(s.lax[v].data, np.float64) for s in samples])[:, None] for v in range(n_views)]
    gt = np.stack([s.relative_gt() for s in samples])
    return Batch(sax, lax, gt, samples)


def forward(model: HybridVNet, batch: Batch, training: bool = False, rng=None):
    lax = batch.lax if model.config.mode == "multi_view" else None
    return model.forward(batch.sax, lax, training=training, rng=rng)


def predict_relative(model: HybridVNet, samples: list[MultiViewSample], batch_size: int = 4) -> np.ndarray:
    """Mean-latent predictions for network-space samples, (N, M, 3) relative."""
    out = []
    for i in range(0, len(samples), batch_size):
        outputs, _ = forward(model, make_batch(samples[i:i + batch_size]))
        out.append(np.asarray(outputs.final.data))
    return np.concatenate(out, axis=0)


def predict_mm(model: HybridVNet, samples: list[MultiViewSample], batch_size: int = 4) -> list[np.ndarray]:
    rel = predict_relative(model, samples, batch_size)
    return [to_mm(r, s.transform).coords for r, s in zip(rel, samples)]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STEP_STREAM, int(step)]))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _ORDER_STREAM, int(epoch)])).permutation(n)


def _truncate_csv(path: Path, columns, last_step: int) -> None:
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= last_step]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns)
        w.writeheader()
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class CsvLog:
    def __init__(self, path: Path, columns, append: bool):
        self.path = path
        self.columns = columns
        fresh = not (append and path.exists())
        self.fh = path.open("w" if fresh else "a", newline="")
        self.writer = csv.DictWriter(self.fh, columns)
        if fresh:
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.writer.writerow({k: _fmt(row.get(k, "")) for k in self.columns})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


@dataclass
class TrainResult:
    run_dir: Path
    steps: int
    epochs: int
    checkpoint: Path | None
    val_mse: float | None
    seconds: float


class Trainer:
    """One training run writing into ``run_dir``.

    Every random draw is keyed on (seed, step) or (seed, epoch), so an
    interrupted run resumed from a checkpoint retraces the uninterrupted one.
    """

    def __init__(self, cfg: RunConfig, run_dir, dataset: PhantomDataset | None = None, workers: int | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.dataset = dataset if dataset is not None else PhantomDataset.open(cfg.data.path)
        self.kind = self.dataset.template_kind
        self.topology = load_template(self.kind).topology
        self.model = build_model(cfg, self.kind)
        self.hierarchy = self.model.hierarchy
        opt = cfg.optimizer
        self.optimizer = Adam(self.model.params, lr=opt.lr, weight_decay=opt.weight_decay)
        self.weights = cfg.loss_weights()
        n_workers = workers if workers is not None else cfg.data.workers
        self.train = self.dataset.load_split("train", n_workers)
        self.val = self.dataset.load_split("val", n_workers)
        if not self.train:
            raise ValueError("training split is empty")
        self.steps_per_epoch = math.ceil(len(self.train) / opt.batch_size)
        self.step = 0
        self._val_net = [to_network(s, cfg) for s in self.val]

    # ------------------------------------------------------------ persistence

    def meta(self, epoch: int) -> dict:
        return {
            "config": self.cfg.to_dict(), "model_hash": self.cfg.model_hash(), "seed": self.cfg.run.seed,
            "dataset_hash": self.dataset.dataset_hash(), "template": self.kind, "step": self.step, "epoch": epoch,
        }

    def resume(self, path) -> None:
        path = Path(path)
        if path.is_dir():
            path = latest_checkpoint(path)
        arrays, moments, meta = load_checkpoint(path)
        for key, mine in (("model_hash", self.cfg.model_hash()), ("seed", self.cfg.run.seed),
                          ("dataset_hash", self.dataset.dataset_hash()), ("template", self.kind)):
            if meta.get(key) != mine:
                raise ResumeError(f"{path}: checkpoint {key} {meta.get(key)!r} does not match this run ({mine!r})")
        if set(arrays) != set(self.model.params):
            raise ResumeError(f"{path}: parameter names differ from the configured model")
        for name, p in self.model.params.items():
            if arrays[name].shape != p.shape:
                raise ResumeError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name].copy()
            st = self.optimizer.states[name]
            self.optimizer.states[name] = replace(st, m=moments[name]["m"], v=moments[name]["v"], step=moments[name]["step"])
        self.step = int(meta["step"])
        _truncate_csv(self.run_dir / "train_log.csv", LOG_COLUMNS, self.step - 1)
        _truncate_csv(self.run_dir / "val_curve.csv", VAL_COLUMNS, self.step)
        log.info("resumed from %s at step %d", path, self.step)

    def _save(self, epoch: int) -> Path:
        d = self.run_dir / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"epoch_{epoch:04d}.ckpt"
        save_checkpoint(path, self.model.params, self.optimizer.states, self.meta(epoch))
        keep = self.cfg.run.keep_checkpoints
        if keep > 0:
            for old in sorted(d.glob("epoch_*.ckpt"))[:-keep]:
                old.unlink()
        return path

    # ------------------------------------------------------------ one step

    def loss_on(self, batch: Batch, rng: np.random.Generator | None, training: bool = True):
        outputs, dist = forward(self.model, batch, training=training, rng=rng)
        levels = {lvl: np.stack([t[lvl] for t in (ds_targets(self.hierarchy, g) for g in batch.gt)])
                  for lvl in range(1, self.hierarchy.n_levels + 1)}
        return total_loss(outputs, dist, batch.gt, self.weights, self.topology, gt_levels=levels)

    def train_batch(self, epoch: int, step_in_epoch: int) -> tuple[dict, Batch]:
        """Draw, augment and learn from the batch for the current step."""
        B = self.cfg.optimizer.batch_size
        order = epoch_order(self.cfg.run.seed, epoch, len(self.train))
        idx = order[step_in_epoch * B:(step_in_epoch + 1) * B]
        rng = step_rng(self.cfg.run.seed, self.step)
        samples = [to_network(self.train[i], self.cfg, rng if self.cfg.data.augment else None) for i in idx]
        batch = make_batch(samples)
        report = self.loss_on(batch, rng)
        self.optimizer.zero_grad()
        backward(report.total)
        self.optimizer.step()
        return report.row(), batch

    def validate(self) -> tuple[float, float]:
        if not self._val_net:
            return float("nan"), float("nan")
        rel = predict_relative(self.model, self._val_net, self.cfg.optimizer.batch_size)
        gt = np.stack([s.relative_gt() for s in self._val_net])
        mse = float(np.mean((rel - gt) ** 2))
        mae = float(np.mean([np.linalg.norm(to_mm(r, s.transform).coords - s.gt.coords, axis=1).mean()
                             for r, s in zip(rel, self._val_net)]))
        return mse, mae

    # ------------------------------------------------------------ loop

    def run(self) -> TrainResult:
        cfg = self.cfg
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.ini").write_text(cfg.to_ini())
        (self.run_dir / "run.json").write_text(json.dumps({
            "seed": cfg.run.seed, "dataset": str(self.dataset.root), "dataset_hash": self.dataset.dataset_hash(),
            "template": self.kind, "model": self.model.describe(), "train_samples": len(self.train),
            "val_samples": len(self.val), "steps_per_epoch": self.steps_per_epoch,
        }, indent=1, sort_keys=True) + "\n")
        resumed = self.step > 0
        train_log = CsvLog(self.run_dir / "train_log.csv", LOG_COLUMNS, append=resumed)
        val_log = CsvLog(self.run_dir / "val_curve.csv", VAL_COLUMNS, append=resumed)
        max_steps = cfg.run.max_steps or None
        total_steps = cfg.optimizer.epochs * self.steps_per_epoch
        if max_steps is not None:
            total_steps = min(total_steps, max_steps)
        t0 = time.perf_counter()
        ckpt = None
        val_mse = None
        recent: list[float] = []
        try:
            while self.step < total_steps:
                epoch, k = divmod(self.step, self.steps_per_epoch)
                lr = lr_at_epoch(cfg.optimizer.lr, epoch, cfg.optimizer.decay)
                self.optimizer.set_lr(lr)
                row, _ = self.train_batch(epoch, k)
                train_log.write({"step": self.step, "epoch": epoch, "lr": lr, **row})
                recent.append(row["recon"])
                self.step += 1
                end_of_epoch = self.step % self.steps_per_epoch == 0
                periodic = cfg.run.val_every and self.step % cfg.run.val_every == 0
                if end_of_epoch or periodic or self.step == total_steps:
                    val_mse, mae = self.validate()
                    val_log.write({"step": self.step, "epoch": epoch, "train_mse": float(np.mean(recent)),
                                   "val_mse": val_mse, "val_mae_mm": mae})
                    recent = []
                    log.info("step %d epoch %d  train %.3e  val %.3e  val MAE %.2f mm  (%.0f s)",
                             self.step, epoch, row["recon"], val_mse, mae, time.perf_counter() - t0)
                if end_of_epoch or self.step == total_steps:
                    ckpt = self._save(epoch + 1 if end_of_epoch else epoch)
        finally:
            train_log.close()
            val_log.close()
        return TrainResult(self.run_dir, self.step, self.step // self.steps_per_epoch, ckpt, val_mse,
                           time.perf_counter() - t0)


def latest_checkpoint(run_dir) -> Path:
    found = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    if not found:
        raise FileNotFoundError(f"{run_dir}: no checkpoints")
    return found[-1]


def load_trained(path) -> tuple[HybridVNet, RunConfig, dict]:
    """Rebuild the model recorded in a checkpoint and load its weights."""
    path = Path(path)
    if path.is_dir():
        path = latest_checkpoint(path)
    arrays, _, meta = load_checkpoint(path)
    if "config" not in meta or "template" not in meta:
        raise ResumeError(f"{path}: checkpoint carries no run configuration")
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg, meta["template"])
    if set(arrays) != set(model.params):
        raise ResumeError(f"{path}: parameters do not match the recorded model")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise ResumeError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].copy()
    return model, cfg, meta


__all__ = [
    "Trainer", "TrainResult", "ResumeError", "Batch", "build_model", "to_network", "make_batch", "forward",
    "predict_relative", "predict_mm", "latest_checkpoint", "load_trained", "LOG_COLUMNS", "VAL_COLUMNS",
]
