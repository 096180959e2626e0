"""Multi-view samples, padding / cropping to the network grid, and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ..mesh.topology import VertexField
from .transforms import SpaceTransform, to_relative_array

LAX_NAMES = ("2ch", "3ch", "4ch")


class CropError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SaxImage:
    data: np.ndarray  # (X, Y, Z)
    spacing: np.ndarray
    origin: np.ndarray  # centre of voxel (0, 0, 0), mm
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "spacing", np.asarray(self.spacing, float).reshape(3))
        object.__setattr__(self, "origin", np.asarray(self.origin, float).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, float).reshape(3, 3))
        if np.asarray(self.data).ndim != 3:
            raise ValueError(f"SAX data must be 3-D, got shape {np.shape(self.data)}")
        if np.any(self.spacing <= 0):
            raise ValueError(f"SAX spacing must be positive, got {self.spacing.tolist()}")


@dataclass(frozen=True, eq=False)
class LaxImage:
    """A 2-D plane: pixel (r, c) sits at ``origin + spacing * (r * row + c * col)``."""

    data: np.ndarray  # (H, W)
    spacing: float
    origin: np.ndarray
    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        for name in ("origin", "row", "col"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(3))
        if np.asarray(self.data).ndim != 2:
            raise ValueError(f"LAX data must be 2-D, got shape {np.shape(self.data)}")
        if self.spacing <= 0:
            raise ValueError(f"LAX spacing must be positive, got {self.spacing}")

    @property
    def center(self) -> np.ndarray:
        H, W = self.data.shape
        return self.origin + self.spacing * ((H - 1) / 2.0 * self.row + (W - 1) / 2.0 * self.col)

    def frame(self) -> dict:
        return {"spacing": float(self.spacing), "origin": self.origin.tolist(), "row": self.row.tolist(),
                "col": self.col.tolist(), "shape": list(self.data.shape)}


@dataclass(frozen=True, eq=False)
class MultiViewSample:
    sax: SaxImage
    lax: tuple  # LaxImage per view, in LAX_NAMES order
    gt: VertexField  # mm
    subject: str
    phase: str
    transform: SpaceTransform | None = None  # set by pad_and_crop
    crop_origin: np.ndarray | None = None  # voxel index chosen by augment (cropped mode)

    def __post_init__(self):
        if self.phase not in ("ED", "ES"):
            raise ValueError(f"phase must be ED or ES, got {self.phase!r}")
        for img in (self.sax, *self.lax):
            d = np.asarray(img.data)
            if d.size and (d.min() < 0 or d.max() > 1):
                raise ValueError(f"{self.subject}/{self.phase}: intensities must lie in [0, 1]")

    def relative_gt(self) -> np.ndarray:
        if self.transform is None:
            raise ValueError("sample has no network-space transform; call pad_and_crop first")
        return to_relative_array(self.gt.coords, self.transform)


@dataclass(frozen=True)
class GridConfig:
    """Network input sizes. ``sax_full`` pads the stored SAX; ``sax_crop`` crops it."""

    sax_full: tuple = (64, 64, 12)
    sax_crop: tuple = (40, 40, 12)
    lax: tuple = (96, 96)

    def sax_shape(self, mode: str) -> tuple:
        return tuple(self.sax_full if mode == "full" else self.sax_crop)


# ------------------------------------------------------------ pad / crop


def _window(data: np.ndarray, start, shape) -> np.ndarray:
    """data[start : start + shape] with zeros wherever the window leaves the array."""
    out = np.zeros(shape, dtype=data.dtype)
    src, dst = [], []
    for s, n, N in zip(start, shape, data.shape):
        lo, hi = max(s, 0), min(s + n, N)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _voxel_coords(points, sax: SaxImage) -> np.ndarray:
    return (np.asarray(points) - sax.origin) @ sax.direction / sax.spacing


def crop_range(sample: MultiViewSample, size) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive range of integer crop origins that keep every gt vertex in [0, 1]^3."""
    v = _voxel_coords(sample.gt.coords, sample.sax)
    size = np.asarray(size, float)
    lo = np.ceil(v.max(0) - size + 0.5 - 1e-9).astype(np.int64)
    hi = np.floor(v.min(0) + 0.5 + 1e-9).astype(np.int64)
    return lo, hi


def _centered_crop(sample: MultiViewSample, size) -> np.ndarray:
    lo, hi = crop_range(sample, size)
    v = _voxel_coords(sample.gt.coords, sample.sax)
    mid = 0.5 * (v.min(0) + v.max(0))
    start = np.floor(mid - (np.asarray(size) - 1) / 2.0 + 0.5).astype(np.int64)
    return np.where(lo <= hi, np.clip(start, lo, hi), start)


def pad_and_crop(sample: MultiViewSample, mode: str, grid: GridConfig = GridConfig()) -> MultiViewSample:
    """Bring SAX and LAX onto the network grid.

    ``full``: zero-pad the SAX (centred) to ``grid.sax_full``. ``cropped``: cut a
    ``grid.sax_crop`` window at ``sample.crop_origin`` (set by augmentation), or
    centred on the heart when unset. LAX images are zero-padded to ``grid.lax``.
    """
    sax = sample.sax
    data = np.asarray(sax.data)
    if mode == "full":
        target = np.asarray(grid.sax_full)
        if np.any(np.asarray(data.shape) > target):
            raise ValueError(f"SAX image {data.shape} is larger than the target {tuple(target)}")
        pad = (target - data.shape) // 2
        crop = np.zeros(3, np.int64)
        start = -pad
    elif mode == "cropped":
        target = np.asarray(grid.sax_crop)
        crop = np.asarray(sample.crop_origin if sample.crop_origin is not None else _centered_crop(sample, target), np.int64)
        pad = np.zeros(3, np.int64)
        start = crop
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'full' or 'cropped'")
    if not np.any(start) and tuple(target) == data.shape:
        new_data = data
    else:
        new_data = _window(data, start, tuple(target))
    new_origin = sax.origin + sax.direction @ (start * sax.spacing)
    transform = SpaceTransform(mode, pad, crop, target, sax.spacing, sax.origin, sax.direction)

    H, W = grid.lax
    lax = []
    for img in sample.lax:
        h, w = img.data.shape
        if h > H or w > W:
            raise ValueError(f"LAX image {img.data.shape} is larger than the target {(H, W)}")
        pr, pc = (H - h) // 2, (W - w) // 2
        if (h, w) == (H, W):
            lax.append(img)
            continue
        out = np.zeros((H, W), dtype=img.data.dtype)
        out[pr:pr + h, pc:pc + w] = img.data
        lax.append(LaxImage(out, img.spacing, img.origin - img.spacing * (pr * img.row + pc * img.col), img.row, img.col))
    return replace(sample, sax=SaxImage(new_data, sax.spacing, new_origin, sax.direction), lax=tuple(lax),
                   transform=transform)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    gain_range: tuple = (0.9, 1.1)
    bias_range: tuple = (-0.05, 0.05)


@dataclass(frozen=True)
class AugmentParams:
    theta_deg: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    gain: float = 1.0
    bias: float = 0.0

    @classmethod
    def draw(cls, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> "AugmentParams":
        r = cfg.max_rotation_deg
        return cls(float(rng.uniform(-r, r)), float(rng.uniform(*cfg.scale_range)), float(rng.uniform(*cfg.scale_range)),
                   float(rng.uniform(*cfg.gain_range)), float(rng.uniform(*cfg.bias_range)))

    @property
    def is_identity(self) -> bool:
        return self.theta_deg == 0 and self.sx == 1 and self.sy == 1 and self.gain == 1 and self.bias == 0


def _axis_point(sample: MultiViewSample) -> np.ndarray:
    """Point on the common long axis of the LAX planes (their shared centre)."""
    if sample.lax:
        return np.mean([img.center for img in sample.lax], axis=0)
    s = sample.sax
    return s.origin + s.direction @ ((np.asarray(s.data.shape) - 1) / 2.0 * s.spacing)


def _intensity(data, gain, bias):
    return np.clip(np.asarray(data) * gain + bias, 0.0, 1.0).astype(np.asarray(data).dtype)


def apply_augmentation(sample: MultiViewSample, p: AugmentParams) -> MultiViewSample:
    """In-plane rotation and xy scaling about the long axis, plus intensity gain/bias.

    The SAX volume and the gt move together; each LAX image is rescaled along
    its in-plane direction by how much the xy scaling stretches that direction,
    and its plane frame follows the rotation.
    """
    if p.is_identity:
        return sample
    t = np.deg2rad(p.theta_deg)
    A2 = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) @ np.diag([p.sx, p.sy])
    A = np.eye(3)
    A[:2, :2] = A2
    c = _axis_point(sample)

    sax = sample.sax
    D = sax.direction
    # output voxel q -> mm -> inverse map -> input voxel
    sp = sax.spacing
    M_mm = D.T @ np.linalg.inv(A) @ D  # acts on image-frame mm offsets
    M = np.diag(1.0 / sp) @ M_mm @ np.diag(sp)
    c_vox = _voxel_coords(c[None], sax)[0]
    offset = c_vox - M @ c_vox
    sax_data = np.asarray(sax.data, np.float64)
    if np.allclose(A, np.eye(3)):
        warped = sax_data
    else:
        warped = ndimage.affine_transform(sax_data, M, offset=offset, order=1, mode="constant", cval=0.0)
    new_sax = SaxImage(_intensity(warped, p.gain, p.bias).astype(np.asarray(sax.data).dtype), sax.spacing, sax.origin, D)
    gt = VertexField(c + (sample.gt.coords - c) @ A.T, "mm")

    lax = []
    for img in sample.lax:
        stretched = A @ img.col
        f = float(np.linalg.norm(stretched))
        data = np.asarray(img.data, np.float64)
        if abs(f - 1.0) > 1e-15:
            H, W = data.shape
            jc = (W - 1) / 2.0
            data = ndimage.affine_transform(data, np.diag([1.0, 1.0 / f]), offset=[0.0, jc - jc / f],
                                             order=1, mode="constant", cval=0.0)
        col = stretched / f
        row = A @ img.row
        row /= np.linalg.norm(row)
        center = c + A @ (img.center - c)
        H, W = data.shape
        origin = center - img.spacing * ((H - 1) / 2.0 * row + (W - 1) / 2.0 * col)
        lax.append(LaxImage(_intensity(data, p.gain, p.bias).astype(np.asarray(img.data).dtype), img.spacing, origin, row, col))
    return replace(sample, sax=new_sax, lax=tuple(lax), gt=gt)


def augment(sample: MultiViewSample, rng: np.random.Generator, mode: str = "full", grid: GridConfig = GridConfig(),
            cfg: AugmentConfig = AugmentConfig()) -> MultiViewSample:
    """Random training augmentation. In cropped mode also draws the crop window
    uniformly among the windows that contain the whole gt mesh."""
    out = apply_augmentation(sample, AugmentParams.draw(rng, cfg))
    if mode == "cropped":
        lo, hi = crop_range(out, grid.sax_crop)
        if np.any(lo > hi):
            raise CropError(
                f"{sample.subject}/{sample.phase}: a {tuple(grid.sax_crop)} crop cannot contain the mesh bounding box"
            )
        out = replace(out, crop_origin=np.array([rng.integers(a, b + 1) for a, b in zip(lo, hi)], np.int64))
    return out
