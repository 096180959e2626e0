"""Chebyshev spectral graph convolution and fixed pooling on mesh graphs."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .autodiff import DiffValue, add, concat, matmul, relu, sparse_dense_matmul, sub
from .autodiff.core import as_value
from .mesh.hierarchy import PoolHierarchy
from .mesh.topology import MeshTopology


@dataclass(frozen=True)
class ChebLayerConfig:
    in_channels: int
    out_channels: int
    K: int = 6
    bias: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True, eq=False)
class GraphOperatorCache:
    """Scaled Laplacian L~ = L - I with lambda_max fixed at 2."""

    L: sp.csr_matrix

    @property
    def n_vertices(self) -> int:
        return self.L.shape[0]

    @cached_property
    def spectral_norm(self) -> float:
        n = self.n_vertices
        if self.L.nnz == 0:
            return 0.0
        if n <= 64:
            return float(np.max(np.abs(np.linalg.eigvalsh(self.L.toarray()))))
        try:
            vals = eigsh(self.L, k=1, which="LM", return_eigenvectors=False, tol=1e-8)
        except ArpackNoConvergence as exc:
            vals = exc.eigenvalues
        return float(np.max(np.abs(vals)))


def scaled_laplacian(topology: MeshTopology | sp.spmatrix) -> GraphOperatorCache:
    A = topology.adjacency if isinstance(topology, MeshTopology) else sp.csr_matrix(topology)
    A = sp.csr_matrix(A, dtype=np.float64)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    # L - I = -D^-1/2 A D^-1/2 ; rows of isolated vertices stay zero
    L = -(sp.diags(inv) @ A @ sp.diags(inv))
    L = sp.csr_matrix(L)
    L.sum_duplicates()
    L.eliminate_zeros()
    # exact symmetry (the product above can differ in the last ulp)
    L = sp.csr_matrix((L + L.T) * 0.5)
    return GraphOperatorCache(L)


def chebyshev_basis(X, cache: GraphOperatorCache, K: int) -> list[DiffValue]:
    """[T_0 X, T_1 X, ..., T_{K-1} X] via the three-term recurrence."""
    X = as_value(X)
    if X.shape[-2] != cache.n_vertices:
        raise ValueError(f"input has {X.shape[-2]} rows, graph has {cache.n_vertices} vertices")
    L = cache.L
    out = [X]
    if K > 1:
        out.append(sparse_dense_matmul(L, X, L))
    for _ in range(2, K):
        lx = sparse_dense_matmul(L, out[-1], L)
        out.append(sub(add(lx, lx), out[-2]))
    return out


def cheb_conv(X, cache: GraphOperatorCache, weights, bias=None, config: ChebLayerConfig | None = None) -> DiffValue:
    """Y = sum_k T_k(L~) X W_k (+ bias), then the configured activation.

    ``weights`` is a sequence of K (C_in, C_out) values. All K terms are
    stacked along channels so the dense work is a single matmul.
    """
    weights = [as_value(w) for w in weights]
    K = len(weights)
    X = as_value(X)
    cin = X.shape[-1]
    if config is not None and (config.K != K or config.in_channels != cin):
        raise ValueError(
            f"cheb_conv: config expects K={config.K}, C_in={config.in_channels}; got K={K}, C_in={cin}"
        )
    for k, w in enumerate(weights):
        if w.ndim != 2 or w.shape[0] != cin:
            raise ValueError(f"cheb_conv: W{k} has shape {w.shape}, input has {cin} channels")
    basis = chebyshev_basis(X, cache, K)
    stacked = basis[0] if K == 1 else concat(basis, axis=-1)
    W = weights[0] if K == 1 else concat(weights, axis=0)
    Y = matmul(stacked, W)
    if bias is not None:
        Y = add(Y, bias)
    if config is not None and config.activation == "relu":
        Y = relu(Y)
    return Y


def apply_pool(X, hierarchy: PoolHierarchy, level: int) -> DiffValue:
    return _apply(X, hierarchy.pool(level))


def apply_unpool(X, hierarchy: PoolHierarchy, level: int) -> DiffValue:
    return _apply(X, hierarchy.unpool(level))


def _apply(X, S) -> DiffValue:
    X = as_value(X)
    if X.shape[-2] != S.shape[1]:
        raise ValueError(f"expected {S.shape[1]} rows for this level, got {X.shape[-2]}")
    return sparse_dense_matmul(S, X)
