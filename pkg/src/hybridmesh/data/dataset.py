"""Phantom dataset generation and on-disk persistence.

Layout::

    <root>/manifest.json
    <root>/subjects/<id>/<ED|ES>/sax.raw, sax.json, lax2ch.raw, lax2ch.json, ...,
                                  gt.ply | gt.node + gt.ele, transform.json

Images are little-endian float32 with a JSON sidecar. The manifest records
the seed, template kind, splits and a SHA-256 of every file.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..mesh.io import read_ply, read_tetgen, write_ply, write_tetgen
from ..mesh.topology import VertexField
from . import phantom
from .sample import LAX_NAMES, LaxImage, MultiViewSample, SaxImage
from .templates import load_template
from .transforms import SpaceTransform

FORMAT_VERSION = 1
PHASES = ("ED", "ES")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)  # train / val / test


class DatasetError(ValueError):
    pass


def worker_count(requested: int | None = None) -> int:
    """Worker pool size, capped by HYBRIDMESH_THREADS when set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("HYBRIDMESH_THREADS")
    if cap:
        try:
            n = min(n, max(int(cap), 1))
        except ValueError as exc:
            raise DatasetError(f"HYBRIDMESH_THREADS must be an integer, got {cap!r}") from exc
    return max(n, 1)


def subject_id(i: int) -> str:
    return f"S{i:04d}"


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_raw(path: Path, data: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes(order="C"))


def _read_raw(path: Path, shape) -> np.ndarray:
    raw = path.read_bytes()
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise DatasetError(f"{path}: expected {4 * n} bytes for shape {tuple(shape)}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_sample(directory: Path, sample: MultiViewSample, template_kind: str, tetras=None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    sax = sample.sax
    _write_raw(directory / "sax.raw", sax.data)
    _dump_json(directory / "sax.json", {
        "shape": list(sax.data.shape), "spacing": sax.spacing.tolist(), "origin": sax.origin.tolist(),
        "direction": sax.direction.tolist(), "dtype": "float32-le",
    })
    for name, img in zip(LAX_NAMES, sample.lax):
        _write_raw(directory / f"lax{name}.raw", img.data)
        _dump_json(directory / f"lax{name}.json", {**img.frame(), "dtype": "float32-le"})
    if template_kind == "surface":
        write_ply(directory / "gt.ply", sample.gt.coords, load_template("surface").topology.faces)
    else:
        write_tetgen(directory / "gt", sample.gt.coords, tetras)
    _dump_json(directory / "transform.json", SpaceTransform.identity(sax.data.shape, sax.spacing, sax.origin, sax.direction).to_dict())


def read_sample(directory: Path, subject: str, phase: str, template_kind: str) -> MultiViewSample:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "sax.json").read_text())
        sax = SaxImage(_read_raw(directory / "sax.raw", meta["shape"]), meta["spacing"], meta["origin"], meta["direction"])
        lax = []
        for name in LAX_NAMES:
            f = json.loads((directory / f"lax{name}.json").read_text())
            lax.append(LaxImage(_read_raw(directory / f"lax{name}.raw", f["shape"]), f["spacing"], f["origin"], f["row"], f["col"]))
        if template_kind == "surface":
            coords, _ = read_ply(directory / "gt.ply")
        else:
            coords, _ = read_tetgen(directory / "gt")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{directory}: unreadable sample ({exc})") from exc
    return MultiViewSample(sax, tuple(lax), VertexField(coords, "mm"), subject, phase)


def _generate_subject(args) -> dict[str, MultiViewSample]:
    seed, index, kind = args
    rng = subject_rng(seed, index)
    template = load_template(kind)
    surf_topo = load_template("surface").topology
    ed = phantom.sample_shape(rng)
    es = phantom.end_systole(ed, rng)
    out = {}
    for phase, params in (("ED", ed), ("ES", es)):
        surf = phantom.surface_coords(params)
        gt = phantom.subject_mesh(template, params, np.zeros(3)) if kind == "tetra" else surf
        sax, origin, spacing, lax, frames = phantom.render(surf, surf_topo, params, rng)
        lax_imgs = tuple(
            LaxImage(lax[n], frames[n]["spacing"], frames[n]["origin"], frames[n]["row"], frames[n]["col"]) for n in LAX_NAMES
        )
        out[phase] = MultiViewSample(SaxImage(sax, spacing, origin), lax_imgs, VertexField(gt, "mm"), subject_id(index), phase)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_splits(ids: list[str], seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, list[str]]:
    """Seeded, subject-disjoint train/val/test split."""
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(len(ids))
    n = len(ids)
    n_test = max(int(round(fractions[2] * n)), 1 if n >= 3 else 0)
    n_val = max(int(round(fractions[1] * n)), 1 if n >= 3 else 0)
    test = sorted(ids[i] for i in order[:n_test])
    val = sorted(ids[i] for i in order[n_test:n_test + n_val])
    train = sorted(ids[i] for i in order[n_test + n_val:])
    return {"train": train, "val": val, "test": test}


def generate_phantom_dataset(out, count: int, seed: int, template: str = "surface", force: bool = False,
                             workers: int | None = None) -> dict:
    """Write ``count`` subjects (ED + ES each) under ``out`` and return the manifest."""
    if template not in ("surface", "tetra"):
        raise DatasetError(f"template must be 'surface' or 'tetra', got {template!r}")
    if count < 1:
        raise DatasetError("count must be at least 1")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    tetras = load_template("tetra").topology.tetras if template == "tetra" else None
    jobs = [(seed, i, template) for i in range(count)]
    n_workers = min(worker_count(workers), count)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            results = pool.map(_generate_subject, jobs, chunksize=max(1, count // (4 * n_workers)))
            results = list(results)
    else:
        results = [_generate_subject(j) for j in jobs]
    ids = []
    for i, samples in enumerate(results):
        sid = subject_id(i)
        ids.append(sid)
        for phase, s in samples.items():
            write_sample(out / "subjects" / sid / phase, s, template, tetras)
    hashes = {}
    for path in sorted(p for p in (out / "subjects").rglob("*") if p.is_file()):
        hashes[path.relative_to(out).as_posix()] = _sha256(path)
    manifest = {
        "format_version": FORMAT_VERSION, "seed": int(seed), "count": int(count), "template": template,
        "phases": list(PHASES), "subjects": ids, "splits": make_splits(ids, seed), "hashes": hashes,
        "n_vertices": int(load_template(template).n_vertices),
    }
    _dump_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class PhantomDataset:
    root: Path
    manifest: dict

    @classmethod
    def open(cls, root, verify: bool = False) -> "PhantomDataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise DatasetError(f"{root}: no manifest.json (not a phantom dataset)")
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported format version {manifest.get('format_version')}")
        ds = cls(root, manifest)
        if verify:
            ds.verify()
        return ds

    @property
    def template_kind(self) -> str:
        return self.manifest["template"]

    def split(self, name: str) -> list[str]:
        try:
            return list(self.manifest["splits"][name])
        except KeyError as exc:
            raise DatasetError(f"unknown split {name!r}; have {sorted(self.manifest['splits'])}") from exc

    def verify(self) -> None:
        for rel, digest in self.manifest["hashes"].items():
            p = self.root / rel
            if not p.is_file():
                raise DatasetError(f"{rel}: listed in the manifest but missing")
            if _sha256(p) != digest:
                raise DatasetError(f"{rel}: content hash does not match the manifest")

    def load(self, subject: str, phase: str) -> MultiViewSample:
        return read_sample(self.root / "subjects" / subject / phase, subject, phase, self.template_kind)

    def load_split(self, name: str, workers: int | None = None) -> list[MultiViewSample]:
        keys = [(s, p) for s in self.split(name) for p in PHASES]
        n = min(worker_count(workers), max(len(keys), 1))
        if n > 1:
            with ProcessPoolExecutor(n) as pool:
                return list(pool.map(_load_one, [(self.root, self.template_kind, s, p) for s, p in keys]))
        return [self.load(s, p) for s, p in keys]

    def dataset_hash(self) -> str:
        """Digest of the manifest's content hashes; identifies the dataset."""
        h = hashlib.sha256()
        for rel in sorted(self.manifest["hashes"]):
            h.update(rel.encode())
            h.update(self.manifest["hashes"][rel].encode())
        return h.hexdigest()


def _load_one(args) -> MultiViewSample:
    root, kind, s, p = args
    return read_sample(Path(root) / "subjects" / s / p, s, p, kind)
