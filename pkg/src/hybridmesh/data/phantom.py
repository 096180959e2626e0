"""Procedural two-ventricle, two-atrium cardiac phantom.

Each structure is an ellipsoid parameterised by a centre and three semi-axes;
its surface is an icosphere pushed through that ellipsoid, so every subject
shares the template's vertex order exactly. Subjects differ by per-structure
axis scales, a smooth low-order bend, a global pose and, for end-systole, a
contraction of the ventricles. Images are rendered from the same surfaces,
which makes the ground truth exact by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import Delaunay
from scipy.spatial.transform import Rotation

from ..evaluation.rasterize import GridSpec, rasterize
from ..mesh.geometry import icosphere, points_inside, ray_crossings, signed_volumes
from ..mesh.topology import STRUCTURES, MeshTopology
from ..mesh.tps import warp_volumetric_template

SURFACES = ("LV_endo", "LV_epi", "RV", "LA", "RA")
SURFACE_LABEL = {"LV_endo": "LV", "LV_epi": "LV", "RV": "RV", "LA": "LA", "RA": "RA"}
SUBDIVISIONS = 2

# blood-pool / tissue intensities of the synthetic bSSFP-like contrast
INTENSITY = {"background": 0.1, "myocardium": 0.35, "LV": 0.9, "RV": 0.85, "LA": 0.8, "RA": 0.75}
NOISE_SIGMA = 0.03
# odd, so the voxel centre is itself one of the subsamples
SUPERSAMPLE = 3

SAX_SHAPE = (56, 56, 12)
SAX_SPACING = (2.0, 2.0, 8.0)
LAX_SHAPE = (64, 64)
LAX_SPACING = 2.0
# view angle about the long axis, measured from the LV -> RV direction
LAX_VIEWS = (("2ch", 120.0), ("3ch", 60.0), ("4ch", 0.0))

# end-diastolic base anatomy (mm): semi-axes, plus the gaps used to stack structures
_LV_ENDO_AXES = np.array([9.0, 9.0, 18.0])
_LV_EPI_AXES = np.array([14.0, 14.0, 23.0])
_LV_ENDO_DROP = 2.0  # endocardium centre sits this far above the epicardium's
_RV_AXES = np.array([8.0, 13.0, 19.0])
_LA_AXES = np.array([10.0, 10.0, 10.0])
_RA_AXES = np.array([8.0, 9.0, 9.0])
_GAP = 1.0


@dataclass(frozen=True)
class ShapeParams:
    """Per-subject anatomy. Scales multiply the base semi-axes per structure."""

    lv_scale: tuple = (1.0, 1.0, 1.0)
    rv_scale: tuple = (1.0, 1.0, 1.0)
    la_scale: tuple = (1.0, 1.0, 1.0)
    ra_scale: tuple = (1.0, 1.0, 1.0)
    wall: float = 1.0  # LV wall thickness factor
    bend: tuple = (0.0, 0.0)  # mm of x / y deflection at |z| = 30 mm
    rotation: tuple = (0.0, 0.0, 0.0)  # xyz Euler angles, degrees
    translation: tuple = (0.0, 0.0, 0.0)  # mm, heart centre relative to image centre
    contraction: float = 1.0  # 1 at end-diastole


def ellipsoids(params: ShapeParams) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(centre, semi-axes) per surface in the heart frame, before bending and pose."""
    c = params.contraction
    lv = np.asarray(params.lv_scale)
    shrink_v = np.array([c, c, 0.5 + 0.5 * c])
    endo = _LV_ENDO_AXES * lv * shrink_v
    wall = (_LV_EPI_AXES - _LV_ENDO_AXES) * params.wall
    # the wall thickens as the cavity contracts, keeping epicardial volume roughly fixed
    epi = endo + wall * np.array([1.0 + 0.8 * (1 - c), 1.0 + 0.8 * (1 - c), 1.0 + 0.4 * (1 - c)])
    rv = _RV_AXES * np.asarray(params.rv_scale) * shrink_v
    grow = 1.0 + 0.5 * (1 - c)
    la = _LA_AXES * np.asarray(params.la_scale) * grow
    ra = _RA_AXES * np.asarray(params.ra_scale) * grow
    epi_c = np.zeros(3)
    endo_c = epi_c + [0.0, 0.0, _LV_ENDO_DROP * lv[2]]
    endo_c[2] = min(endo_c[2], epi_c[2] + epi[2] - endo[2] - 1.0)
    rv_c = np.array([epi[0] + rv[0] + _GAP, 0.0, -0.1 * epi[2]])
    la_c = np.array([0.0, 0.0, epi[2] + la[2] + _GAP])
    ra_c = np.array([rv_c[0], 0.0, rv_c[2] + rv[2] + ra[2] + _GAP])
    return {"LV_endo": (endo_c, endo), "LV_epi": (epi_c, epi), "RV": (rv_c, rv), "LA": (la_c, la), "RA": (ra_c, ra)}


_BASE_CENTER = None


def _base_center() -> np.ndarray:
    """Bounding-box centre of the undeformed template, used as the heart origin."""
    global _BASE_CENTER
    if _BASE_CENTER is None:
        u, _ = icosphere(SUBDIVISIONS)
        pts = np.concatenate([c + a * u for c, a in ellipsoids(ShapeParams()).values()])
        _BASE_CENTER = 0.5 * (pts.min(0) + pts.max(0))
    return _BASE_CENTER


def _deform(points: np.ndarray, params: ShapeParams, image_center) -> np.ndarray:
    p = points - _base_center()
    t = (p[:, 2] / 30.0) ** 2
    p = p + np.stack([params.bend[0] * t, params.bend[1] * t, np.zeros_like(t)], axis=1)
    R = Rotation.from_euler("xyz", params.rotation, degrees=True).as_matrix()
    return p @ R.T + np.asarray(params.translation) + np.asarray(image_center)


def heart_pose(params: ShapeParams, image_center) -> tuple[np.ndarray, np.ndarray]:
    """Long-axis point (posed LV epicardial centre) and long-axis direction."""
    epi_c = ellipsoids(params)["LV_epi"][0]
    point = _deform(epi_c[None], params, image_center)[0]
    R = Rotation.from_euler("xyz", params.rotation, degrees=True).as_matrix()
    return point, R[:, 2]


# ------------------------------------------------------------ templates


@dataclass(frozen=True, eq=False)
class Template:
    kind: str  # "surface" or "tetra"
    topology: MeshTopology
    coords: np.ndarray  # canonical (heart-frame) coordinates, mm
    n_surface: int

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices


def surface_topology() -> MeshTopology:
    u, f = icosphere(SUBDIVISIONS)
    n, nf = len(u), len(f)
    faces = np.concatenate([f + i * n for i in range(len(SURFACES))])
    labels = np.concatenate([np.full(n, STRUCTURES.index(SURFACE_LABEL[s])) for s in SURFACES])
    surfaces = {s: np.arange(i * nf, (i + 1) * nf) for i, s in enumerate(SURFACES)}
    return MeshTopology.build(n * len(SURFACES), faces=faces, labels=labels, surfaces=surfaces)


def surface_coords(params: ShapeParams, image_center=(0.0, 0.0, 0.0)) -> np.ndarray:
    u, _ = icosphere(SUBDIVISIONS)
    ell = ellipsoids(params)
    pts = np.concatenate([ell[s][0] + ell[s][1] * u for s in SURFACES])
    return _deform(pts, params, image_center)


def _interior_points(params: ShapeParams) -> tuple[np.ndarray, np.ndarray]:
    """Interior landmarks of the tetrahedral template: an LV mid-wall shell and,
    for the other chambers, a half-radius shell plus the centre."""
    u2, _ = icosphere(SUBDIVISIONS)
    u1, _ = icosphere(1)
    ell = ellipsoids(params)
    (ce, ae), (cp, ap) = ell["LV_endo"], ell["LV_epi"]
    rows = [np.c_[np.full(len(u2), 0), u2]]
    pts = [0.5 * (ce + ae * u2) + 0.5 * (cp + ap * u2)]
    for k, s in enumerate(("RV", "LA", "RA"), start=1):
        c, a = ell[s]
        shell = np.r_[0.5 * u1, np.zeros((1, 3))]
        rows.append(np.c_[np.full(len(shell), k), shell])
        pts.append(c + a * shell)
    return np.concatenate(pts), np.concatenate(rows)


def build_tetra_template() -> Template:
    """One-time Delaunay fill of the canonical template.

    The LV component is the myocardium between the two LV surfaces; RV, LA and
    RA are filled solid. Tetrahedra are kept when their centroid lies inside
    the component's surfaces (parity), and are positively oriented.
    """
    surf = surface_topology()
    params = ShapeParams()
    base = surface_coords(params)
    interior, rows = _interior_points(params)
    interior = _deform(interior, params, np.zeros(3))
    coords = np.concatenate([base, interior])
    n_s = surf.n_vertices
    nper = n_s // len(SURFACES)
    groups = {
        "LV": (np.r_[np.arange(0, 2 * nper), n_s + np.flatnonzero(rows[:, 0] == 0)], ("LV_endo", "LV_epi")),
        "RV": (np.r_[np.arange(2 * nper, 3 * nper), n_s + np.flatnonzero(rows[:, 0] == 1)], ("RV",)),
        "LA": (np.r_[np.arange(3 * nper, 4 * nper), n_s + np.flatnonzero(rows[:, 0] == 2)], ("LA",)),
        "RA": (np.r_[np.arange(4 * nper, 5 * nper), n_s + np.flatnonzero(rows[:, 0] == 3)], ("RA",)),
    }
    tets = []
    for vids, names in groups.values():
        tri = Delaunay(coords[vids], qhull_options="Qbb Qc Qz Q12")
        t = vids[tri.simplices]
        faces = np.concatenate([surf.surface_faces(n) for n in names])
        keep = points_inside(coords[t].mean(axis=1), coords, faces)
        t = t[keep]
        vol = signed_volumes(coords, t)
        scale = np.ptp(coords[vids], axis=0).max() ** 3
        t, vol = t[np.abs(vol) > 1e-7 * scale], vol[np.abs(vol) > 1e-7 * scale]
        t[vol < 0] = t[vol < 0][:, [0, 2, 1, 3]]
        tets.append(t)
    tets = np.concatenate(tets)
    labels = np.r_[surf.labels, [STRUCTURES.index(("LV", "RV", "LA", "RA")[int(k)]) for k in rows[:, 0]]]
    topo = MeshTopology.build(len(coords), faces=surf.faces, tetras=tets, labels=labels, surfaces=surf.surfaces)
    return Template("tetra", topo, coords, n_s)


def build_surface_template() -> Template:
    topo = surface_topology()
    return Template("surface", topo, surface_coords(ShapeParams()), topo.n_vertices)


def subject_mesh(template: Template, params: ShapeParams, image_center) -> np.ndarray:
    """Ground-truth vertex coordinates (mm) of one subject on ``template``."""
    surf = surface_coords(params, image_center)
    if template.kind == "surface":
        return surf
    return warp_volumetric_template(template.coords, np.arange(template.n_surface), surf)


# ------------------------------------------------------------ sampling


def sample_shape(rng: np.random.Generator) -> ShapeParams:
    scale = lambda: tuple(rng.uniform(0.8, 1.25, 3))  # noqa: E731
    return ShapeParams(
        lv_scale=scale(), rv_scale=scale(), la_scale=scale(), ra_scale=scale(),
        wall=float(rng.uniform(0.85, 1.15)),
        bend=tuple(rng.uniform(-2.0, 2.0, 2)),
        rotation=(float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), float(rng.uniform(-20, 20))),
        translation=(float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), float(rng.uniform(-2, 2))),
    )


def end_systole(params: ShapeParams, rng: np.random.Generator) -> ShapeParams:
    return replace(params, contraction=float(rng.uniform(0.72, 0.88)))


# ------------------------------------------------------------ image synthesis


def _sax_grid(shape=SAX_SHAPE, spacing=SAX_SPACING):
    """Origin and spacing of a SAX grid whose centre is at (0, 0, 0) mm."""
    shape = np.asarray(shape)
    spacing = np.asarray(spacing, float)
    return -(shape - 1) / 2.0 * spacing, spacing


def _composite(occ: dict[str, np.ndarray]) -> np.ndarray:
    bg = INTENSITY["background"]
    img = np.full(next(iter(occ.values())).shape, bg)
    myo = np.clip(occ["LV_epi"] - occ["LV_endo"], 0.0, 1.0)
    img += myo * (INTENSITY["myocardium"] - bg)
    img += occ["LV_endo"] * (INTENSITY["LV"] - bg)
    for s in ("RV", "LA", "RA"):
        img += occ[s] * (INTENSITY[s] - bg)
    return img


def sax_occupancy(coords: np.ndarray, topology: MeshTopology, shape=SAX_SHAPE, spacing=SAX_SPACING,
                  supersample: int = SUPERSAMPLE) -> dict[str, np.ndarray]:
    """Fraction of each voxel inside each closed surface, from a supersampled parity raster."""
    origin, spacing = _sax_grid(shape, spacing)
    k = supersample
    fine_sp = spacing / k
    fine_origin = origin - spacing / 2.0 + fine_sp / 2.0
    grid = GridSpec(tuple(int(s) * k for s in shape), tuple(fine_sp), tuple(fine_origin))
    out = {}
    for s in SURFACES:
        m = rasterize(coords, topology.surface_faces(s), grid).mask.astype(np.float64)
        out[s] = m.reshape(shape[0], k, shape[1], k, shape[2], k).mean(axis=(1, 3, 5))
    return out


def lax_frames(params: ShapeParams, center=(0.0, 0.0, 0.0), shape=LAX_SHAPE, spacing=LAX_SPACING) -> dict[str, dict]:
    """Plane frames of the three long-axis views: rows follow the long axis
    (base at the top), columns the in-plane direction at the view angle."""
    point, axis = heart_pose(params, center)
    R = Rotation.from_euler("xyz", params.rotation, degrees=True).as_matrix()
    frames = {}
    H, W = shape
    for name, angle in LAX_VIEWS:
        a = np.deg2rad(angle)
        col = R @ np.array([np.cos(a), np.sin(a), 0.0])
        row = -axis
        origin = point - (H - 1) / 2.0 * spacing * row - (W - 1) / 2.0 * spacing * col
        frames[name] = {"origin": origin, "row": row, "col": col, "spacing": float(spacing), "shape": (H, W)}
    return frames


def lax_occupancy(coords, topology, frame, supersample: int = SUPERSAMPLE) -> dict[str, np.ndarray]:
    """Fraction of each LAX pixel inside each closed surface.

    The mesh is expressed in the plane frame (normal, column, row) so every
    supersample is the foot of a ray along the normal; a sample is inside when
    an odd number of crossings lie beyond the plane.
    """
    H, W = frame["shape"]
    k = supersample
    sp = frame["spacing"]
    row, col = np.asarray(frame["row"]), np.asarray(frame["col"])
    normal = np.cross(row, col)
    local = (np.asarray(coords) - frame["origin"]) @ np.stack([normal, col, row], axis=1)
    sub = (np.arange(k) + 0.5) / k - 0.5
    cs = sp * (np.arange(W)[:, None] + sub[None]).ravel()
    rs = sp * (np.arange(H)[:, None] + sub[None]).ravel()
    out = {}
    for s in SURFACES:
        ray, x = ray_crossings(local, topology.surface_faces(s), cs, rs)
        counts = np.bincount(ray[x > 0], minlength=len(cs) * len(rs))
        inside = (counts % 2).reshape(len(cs), len(rs)).T.astype(np.float64)
        out[s] = inside.reshape(H, k, W, k).mean(axis=(1, 3))
    return out


def render(coords, topology, params: ShapeParams, rng: np.random.Generator):
    """SAX volume, LAX images (float32 in [0, 1]) and geometry for one subject/phase."""
    occ = sax_occupancy(coords, topology)
    sax = _composite(occ)
    sax = np.clip(sax + rng.normal(0.0, NOISE_SIGMA, sax.shape), 0.0, 1.0).astype(np.float32)
    origin, spacing = _sax_grid()
    frames = lax_frames(params)
    lax = {}
    for name, frame in frames.items():
        img = _composite(lax_occupancy(coords, topology, frame))
        lax[name] = np.clip(img + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0).astype(np.float32)
    return sax, origin, spacing, lax, frames
