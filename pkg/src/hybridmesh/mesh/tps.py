"""3D thin-plate spline warps with the biharmonic kernel U(r) = r."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


class SingularLandmarksError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class TpsWarp:
    source: np.ndarray  # (L, 3)
    affine: np.ndarray  # (4, 3): rows [1, x, y, z]
    weights: np.ndarray  # (L, 3)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, float)
        out = np.empty_like(points)
        for start in range(0, len(points), 4096):
            q = points[start:start + 4096]
            K = cdist(q, self.source)
            out[start:start + 4096] = self.affine[0] + q @ self.affine[1:] + K @ self.weights
        return out

    def bending_energy(self) -> float:
        # U(r) = r is conditionally negative definite, so the energy carries a minus sign
        K = cdist(self.source, self.source)
        return float(-np.trace(self.weights.T @ K @ self.weights))


def fit_tps(source, target, regularization: float = 0.0) -> TpsWarp:
    """Solve for the TPS taking ``source`` landmarks onto ``target``.

    With ``regularization`` 0 the warp interpolates the landmarks; larger
    values trade interpolation for a smoother (lower bending) map.
    """
    X = np.asarray(source, float)
    Y = np.asarray(target, float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"source/target must both be (L, 3), got {X.shape} and {Y.shape}")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    L = len(X)
    P = np.concatenate([np.ones((L, 1)), X], axis=1)
    if L < 4 or np.linalg.matrix_rank(P - np.r_[0, X.mean(0)], tol=1e-9 * max(np.ptp(X), 1.0)) < 4:
        raise SingularLandmarksError("TPS needs at least 4 non-coplanar landmarks")
    K = cdist(X, X) - regularization * np.eye(L)
    A = np.zeros((L + 4, L + 4))
    A[:L, :L] = K
    A[:L, L:] = P
    A[L:, :L] = P.T
    b = np.zeros((L + 4, 3))
    b[:L] = Y
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularLandmarksError(f"singular TPS system: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularLandmarksError("singular TPS system (non-finite solution)")
    return TpsWarp(X.copy(), sol[L:], sol[:L])


def warp_volumetric_template(template_coords, surface_index, subject_surface, regularization: float = 0.0):
    """Carry a tetrahedral template onto a subject surface.

    ``surface_index[i]`` is the template vertex corresponding to subject
    surface vertex ``i``. Surface vertices land exactly on the subject;
    interior vertices follow the TPS fitted on the surface correspondences.
    """
    T = np.asarray(template_coords, float)
    idx = np.asarray(surface_index, np.int64)
    S = np.asarray(subject_surface, float)
    if len(idx) != len(S):
        raise ValueError(f"{len(idx)} surface indices but {len(S)} subject vertices")
    warp = fit_tps(T[idx], S, regularization)
    out = warp(T)
    out[idx] = S
    return out
