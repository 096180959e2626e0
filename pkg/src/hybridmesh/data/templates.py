"""Template meshes shipped as package assets, plus their pooling hierarchies."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ..mesh.hierarchy import PoolHierarchy, build_hierarchy
from ..mesh.io import read_ply, read_tetgen, write_ply, write_tetgen
from ..mesh.topology import STRUCTURES, MeshTopology
from .phantom import SURFACES, Template, build_surface_template, build_tetra_template

TEMPLATE_KINDS = ("surface", "tetra")


def asset_dir() -> Path:
    return Path(str(resources.files("hybridmesh") / "assets"))


def write_template_assets(directory=None) -> None:
    """Regenerate the template assets (deterministic)."""
    d = Path(directory) if directory is not None else asset_dir()
    d.mkdir(parents=True, exist_ok=True)
    s = build_surface_template()
    t = build_tetra_template()
    write_ply(d / "template_surface.ply", s.coords, s.topology.faces)
    write_tetgen(d / "template_tetra", t.coords, t.topology.tetras)
    meta = {
        "structures": list(STRUCTURES),
        "surfaces": {name: [int(idx[0]), int(idx[-1]) + 1] for name, idx in s.topology.surfaces.items()},
        "surface_order": list(SURFACES),
        "n_surface": int(s.n_vertices),
        "labels_surface": s.topology.labels.tolist(),
        "labels_tetra": t.topology.labels.tolist(),
    }
    (d / "template.json").write_text(json.dumps(meta, indent=1) + "\n")


@lru_cache(maxsize=None)
def load_template(kind: str = "surface", directory: str | None = None) -> Template:
    if kind not in TEMPLATE_KINDS:
        raise ValueError(f"template kind must be one of {TEMPLATE_KINDS}, got {kind!r}")
    d = Path(directory) if directory is not None else asset_dir()
    meta = json.loads((d / "template.json").read_text())
    surf_coords, faces = read_ply(d / "template_surface.ply")
    surfaces = {name: np.arange(a, b) for name, (a, b) in meta["surfaces"].items()}
    n_s = int(meta["n_surface"])
    if kind == "surface":
        topo = MeshTopology.build(n_s, faces=faces, labels=meta["labels_surface"], surfaces=surfaces)
        return Template("surface", topo, surf_coords, n_s)
    coords, tetras = read_tetgen(d / "template_tetra")
    if not np.array_equal(coords[:n_s], surf_coords):
        raise ValueError("tetra template surface vertices do not match the surface template")
    topo = MeshTopology.build(len(coords), faces=faces, tetras=tetras, labels=meta["labels_tetra"], surfaces=surfaces)
    return Template("tetra", topo, coords, n_s)


@lru_cache(maxsize=None)
def template_hierarchy(kind: str = "surface", levels: int = 4) -> PoolHierarchy:
    t = load_template(kind)
    return build_hierarchy(t.topology, t.coords, levels)
