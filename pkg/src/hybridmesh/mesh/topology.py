"""Fixed-topology mesh containers shared by every sample of a dataset."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

STRUCTURES = ("LV", "RV", "LA", "RA", "AORTA")

# corner pairs of a tetrahedron, in a fixed order
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


class TopologyError(ValueError):
    pass


def _edges_from(faces: np.ndarray, tetras: np.ndarray) -> np.ndarray:
    parts = []
    if len(faces):
        parts.append(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2))
    if len(tetras):
        parts.append(tetras[:, TET_EDGES.ravel()].reshape(-1, 2))
    if not parts:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(np.concatenate(parts), axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Connectivity of a fixed-topology mesh.

    ``surfaces`` maps a closed sub-surface name (e.g. ``"LV_endo"``) to the
    indices of its faces in ``faces``. ``labels`` holds one index into
    :data:`STRUCTURES` per vertex.
    """

    n_vertices: int
    faces: np.ndarray
    tetras: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    surfaces: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, n_vertices, faces=None, tetras=None, labels=None, surfaces=None, edges=None):
        faces = np.zeros((0, 3), np.int64) if faces is None else np.asarray(faces, np.int64).reshape(-1, 3)
        tetras = np.zeros((0, 4), np.int64) if tetras is None else np.asarray(tetras, np.int64).reshape(-1, 4)
        if edges is None:
            edges = _edges_from(faces, tetras)
        else:
            edges = np.unique(np.sort(np.asarray(edges, np.int64).reshape(-1, 2), axis=1), axis=0)
        labels = np.zeros(n_vertices, np.int64) if labels is None else np.asarray(labels, np.int64)
        surfaces = {k: np.asarray(v, np.int64) for k, v in (surfaces or {}).items()}
        topo = cls(int(n_vertices), faces, tetras, edges, labels, surfaces)
        topo.validate()
        return topo

    def validate(self) -> None:
        M = self.n_vertices
        for name, arr in (("edge", self.edges), ("face", self.faces), ("tetra", self.tetras)):
            if arr.size and (arr.min() < 0 or arr.max() >= M):
                bad = int(np.argmax((arr < 0).any(1) | (arr >= M).any(1)))
                raise TopologyError(f"{name} {bad} has an index outside [0, {M}): {arr[bad].tolist()}")
            if arr.size:
                s = np.sort(arr, axis=1)
                dup = (s[:, 1:] == s[:, :-1]).any(axis=1)
                if dup.any():
                    raise TopologyError(f"degenerate {name} {int(np.argmax(dup))}: {arr[np.argmax(dup)].tolist()}")
        if self.labels.shape != (M,):
            raise TopologyError(f"labels must have shape ({M},), got {self.labels.shape}")
        for name, idx in self.surfaces.items():
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.faces)):
                raise TopologyError(f"surface {name!r} references a face outside [0, {len(self.faces)})")

    @property
    def is_volumetric(self) -> bool:
        return len(self.tetras) > 0

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        M = self.n_vertices
        e = self.edges
        data = np.ones(2 * len(e))
        A = sp.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(M, M))
        return A.tocsr()

    @cached_property
    def surface_vertices(self) -> np.ndarray:
        return np.unique(self.faces) if len(self.faces) else np.zeros(0, np.int64)

    @cached_property
    def components(self) -> np.ndarray:
        """Connected-component id per vertex (ids ordered by lowest vertex)."""
        _, comp = sp.csgraph.connected_components(self.adjacency, directed=False)
        # relabel so component ids appear in vertex order
        _, first = np.unique(comp, return_index=True)
        order = np.argsort(first)
        remap = np.empty_like(order)
        remap[order] = np.arange(len(order))
        return remap[comp]

    def structure_mask(self, structures) -> np.ndarray:
        if isinstance(structures, str):
            structures = [structures]
        codes = [STRUCTURES.index(s) for s in structures]
        return np.isin(self.labels, codes)

    def surface_faces(self, name: str) -> np.ndarray:
        return self.faces[self.surfaces[name]]


def boundary_edges(faces: np.ndarray) -> np.ndarray:
    """Edges used by exactly one face (empty for a closed surface)."""
    if len(faces) == 0:
        return np.zeros((0, 2), np.int64)
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


@dataclass(frozen=True, eq=False)
class VertexField:
    """Per-vertex coordinates tagged with the space they live in."""

    coords: np.ndarray
    space: str = "mm"

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", c)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"VertexField coords must be (M, 3), got {c.shape}")
        if self.space not in ("mm", "relative"):
            raise ValueError(f"unknown coordinate space {self.space!r}")
        if not np.all(np.isfinite(c)):
            raise ValueError("VertexField contains non-finite coordinates")
        if self.space == "relative" and (c.min() < -0.5 or c.max() > 1.5):
            warnings.warn("relative coordinates outside [-0.5, 1.5]", RuntimeWarning, stacklevel=3)

    def __len__(self) -> int:
        return len(self.coords)
