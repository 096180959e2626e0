"""Mesh and hierarchy file formats.

* Surfaces: ASCII PLY (``vertex`` x/y/z as double, ``face`` vertex_indices).
* Tetrahedra: TetGen-style ``.node`` / ``.ele`` pair, 1-based indices on disk.
* Hierarchies: binary container, little-endian::

      b"HMHIER\\x00\\x00", uint32 version, uint32 n_levels, uint32 n_arrays
      per array: uint16 name_len, name, uint8 dtype ('f' float64 | 'i' int64),
                 uint8 ndim, uint64[ndim] shape, raw row-major data

  Arrays are named ``L{i}/P/{indptr,indices,data}`` (CSR triplets),
  ``L{i}/U/...``, ``L{i}/shape_P``, ``L{i}/faces``, ``L{i}/tetras``,
  ``L{i}/labels``, ``L{i}/coords`` and ``L{i}/surface/<name>``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .hierarchy import PoolHierarchy
from .topology import MeshTopology


class MeshFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------- PLY


def write_ply(path, coords: np.ndarray, faces: np.ndarray) -> None:
    coords = np.asarray(coords, float)
    faces = np.asarray(faces, np.int64)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(coords)}",
        "property double x", "property double y", "property double z",
        f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header",
    ]
    lines += [" ".join(_fmt(v) for v in row) for row in coords]
    lines += ["3 " + " ".join(str(int(i)) for i in row) for row in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise MeshFormatError(f"{path}:1: missing 'ply' magic")
    n_v = n_f = None
    ln = 1
    while True:
        if ln >= len(text):
            raise MeshFormatError(f"{path}: header has no end_header")
        tok = text[ln].split()
        ln += 1
        if tok[:2] == ["element", "vertex"]:
            n_v = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_f = int(tok[2])
        elif tok == ["format", "ascii", "1.0"] or not tok or tok[0] in ("property", "comment"):
            continue
        elif tok[0] == "end_header":
            break
        elif tok[0] == "format":
            raise MeshFormatError(f"{path}:{ln}: only ascii PLY is supported")
        else:
            raise MeshFormatError(f"{path}:{ln}: unexpected header line {text[ln - 1]!r}")
    if n_v is None or n_f is None:
        raise MeshFormatError(f"{path}: header must declare vertex and face elements")
    coords = np.empty((n_v, 3))
    for i in range(n_v):
        parts = text[ln + i].split() if ln + i < len(text) else []
        if len(parts) != 3:
            raise MeshFormatError(f"{path}:{ln + i + 1}: expected 3 coordinates")
        try:
            coords[i] = [float(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"{path}:{ln + i + 1}: bad coordinate") from None
    ln += n_v
    faces = np.empty((n_f, 3), np.int64)
    for i in range(n_f):
        parts = text[ln + i].split() if ln + i < len(text) else []
        if len(parts) != 4 or parts[0] != "3":
            raise MeshFormatError(f"{path}:{ln + i + 1}: expected a triangle '3 a b c'")
        idx = [int(p) for p in parts[1:]]
        if min(idx) < 0 or max(idx) >= n_v:
            raise MeshFormatError(f"{path}:{ln + i + 1}: face index outside [0, {n_v})")
        faces[i] = idx
    return coords, faces


# ---------------------------------------------------------------- TetGen


def write_tetgen(stem, coords: np.ndarray, tetras: np.ndarray) -> None:
    stem = Path(stem)
    coords = np.asarray(coords, float)
    node = [f"{len(coords)} 3 0 0"] + [
        f"{i + 1} " + " ".join(_fmt(v) for v in row) for i, row in enumerate(coords)
    ]
    ele = [f"{len(tetras)} 4 0"] + [
        f"{i + 1} " + " ".join(str(int(j) + 1) for j in row) for i, row in enumerate(tetras)
    ]
    stem.with_suffix(".node").write_text("\n".join(node) + "\n")
    stem.with_suffix(".ele").write_text("\n".join(ele) + "\n")


def _body(path):
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append((n, line.split()))
    if not rows:
        raise MeshFormatError(f"{path}: empty file")
    return rows


def read_tetgen(stem) -> tuple[np.ndarray, np.ndarray]:
    stem = Path(stem)
    node_path, ele_path = stem.with_suffix(".node"), stem.with_suffix(".ele")
    rows = _body(node_path)
    (hl, head), body = rows[0], rows[1:]
    n = int(head[0])
    if len(body) != n:
        raise MeshFormatError(f"{node_path}:{hl}: header declares {n} nodes, found {len(body)}")
    coords = np.empty((n, 3))
    for i, (ln, parts) in enumerate(body):
        if len(parts) < 4 or int(parts[0]) != i + 1:
            raise MeshFormatError(f"{node_path}:{ln}: expected '{i + 1} x y z'")
        coords[i] = [float(p) for p in parts[1:4]]
    rows = _body(ele_path)
    (hl, head), body = rows[0], rows[1:]
    t = int(head[0])
    if len(body) != t:
        raise MeshFormatError(f"{ele_path}:{hl}: header declares {t} elements, found {len(body)}")
    tets = np.empty((t, 4), np.int64)
    for i, (ln, parts) in enumerate(body):
        if len(parts) < 5 or int(parts[0]) != i + 1:
            raise MeshFormatError(f"{ele_path}:{ln}: expected '{i + 1} a b c d'")
        idx = [int(p) - 1 for p in parts[1:5]]
        if min(idx) < 0 or max(idx) >= n:
            raise MeshFormatError(f"{ele_path}:{ln}: node index outside [1, {n}]")
        tets[i] = idx
    return coords, tets


# ---------------------------------------------------------------- arrays / hierarchy

_MAGIC = b"HMHIER\x00\x00"
_VERSION = 1


def write_arrays(path, arrays: dict[str, np.ndarray], n_levels: int = 0) -> None:
    out = [_MAGIC, struct.pack("<III", _VERSION, n_levels, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = b"f" if arr.dtype.kind == "f" else b"i"
        data = np.ascontiguousarray(arr, dtype="<f8" if code == b"f" else "<i8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + code + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + data.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_arrays(path) -> tuple[dict[str, np.ndarray], int]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise MeshFormatError(f"{path}: not a hierarchy container")
    version, n_levels, count = struct.unpack_from("<III", buf, 8)
    if version != _VERSION:
        raise MeshFormatError(f"{path}: unsupported version {version}")
    pos = 20
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode()
        pos += nl
        code = buf[pos:pos + 1]
        (ndim,) = struct.unpack_from("<B", buf, pos + 1)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        dt = "<f8" if code == b"f" else "<i8"
        arrays[name] = np.frombuffer(buf, dtype=dt, count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return arrays, n_levels


def _topo_arrays(prefix, topo: MeshTopology, coords):
    d = {f"{prefix}/faces": topo.faces, f"{prefix}/tetras": topo.tetras,
         f"{prefix}/labels": topo.labels, f"{prefix}/coords": coords,
         f"{prefix}/n": np.array([topo.n_vertices])}
    for name, idx in topo.surfaces.items():
        d[f"{prefix}/surface/{name}"] = idx
    return d


def _topo_from(prefix, arrays):
    surfaces = {k.split("/surface/", 1)[1]: v for k, v in arrays.items() if k.startswith(f"{prefix}/surface/")}
    topo = MeshTopology.build(int(arrays[f"{prefix}/n"][0]), arrays[f"{prefix}/faces"],
                              arrays[f"{prefix}/tetras"], arrays[f"{prefix}/labels"], surfaces)
    return topo, arrays[f"{prefix}/coords"]


def save_hierarchy(path, h: PoolHierarchy) -> None:
    arrays = _topo_arrays("L0", h.topologies[0], h.coords[0])
    for i in range(h.n_levels):
        for tag, mat in (("P", h.pools[i]), ("U", h.unpools[i])):
            m = sp.csr_matrix(mat)
            arrays[f"L{i + 1}/{tag}/indptr"] = m.indptr.astype(np.int64)
            arrays[f"L{i + 1}/{tag}/indices"] = m.indices.astype(np.int64)
            arrays[f"L{i + 1}/{tag}/data"] = m.data.astype(np.float64)
            arrays[f"L{i + 1}/{tag}/shape"] = np.array(m.shape, np.int64)
        arrays.update(_topo_arrays(f"L{i + 1}", h.topologies[i + 1], h.coords[i + 1]))
    write_arrays(path, arrays, h.n_levels)


def load_hierarchy(path) -> PoolHierarchy:
    arrays, n_levels = read_arrays(path)
    topo, c = _topo_from("L0", arrays)
    pools, unpools, topos, coords = [], [], [topo], [c]
    for i in range(1, n_levels + 1):
        mats = []
        for tag in ("P", "U"):
            mats.append(sp.csr_matrix(
                (arrays[f"L{i}/{tag}/data"], arrays[f"L{i}/{tag}/indices"], arrays[f"L{i}/{tag}/indptr"]),
                shape=tuple(arrays[f"L{i}/{tag}/shape"]),
            ))
        pools.append(mats[0])
        unpools.append(mats[1])
        t, c = _topo_from(f"L{i}", arrays)
        topos.append(t)
        coords.append(c)
    return PoolHierarchy(pools, unpools, topos, coords)
