import numpy as np
import pytest

from hybridmesh.autodiff import DiffValue, backward, grad_check, sum_
from hybridmesh.graph import (
    ChebLayerConfig, apply_pool, apply_unpool, cheb_conv, scaled_laplacian,
)
from hybridmesh.mesh import MeshTopology, build_hierarchy, icosphere


def _random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return MeshTopology.build(n, edges=np.array(edges, np.int64).reshape(-1, 2))


def _dense_cheb(Lt, X, Ws):
    lam, U = np.linalg.eigh(Lt)
    out = np.zeros((X.shape[0], Ws[0].shape[1]))
    # T_k(lambda) via the trigonometric-free recurrence on eigenvalues
    T = [np.ones_like(lam), lam]
    for k in range(2, len(Ws)):
        T.append(2 * lam * T[-1] - T[-2])
    for k, W in enumerate(Ws):
        out += U @ np.diag(T[k]) @ U.T @ X @ W
    return out


def test_two_node_path():
    L = scaled_laplacian(MeshTopology.build(2, edges=[[0, 1]])).L.toarray()
    np.testing.assert_array_equal(L, [[0, -1], [-1, 0]])


def test_edgeless_is_zero():
    cache = scaled_laplacian(MeshTopology.build(5))
    assert cache.L.nnz == 0 and cache.spectral_norm == 0.0


def test_symmetry_and_spectral_radius():
    v, f = icosphere(2)
    cache = scaled_laplacian(MeshTopology.build(len(v), faces=f))
    assert (cache.L != cache.L.T).nnz == 0
    assert cache.spectral_norm <= 1 + 1e-6
    g = _random_graph(9, 0.4, 3)
    c = scaled_laplacian(g)
    assert c.spectral_norm <= 1 + 1e-6


def test_isolated_vertex_zero_row():
    g = MeshTopology.build(4, edges=[[0, 1], [1, 2]])
    L = scaled_laplacian(g).L.toarray()
    assert np.all(L[3] == 0) and np.all(L[:, 3] == 0)


def test_identity_case():
    g = _random_graph(7, 0.5, 0)
    X = np.random.default_rng(1).normal(size=(7, 3))
    Y = cheb_conv(X, scaled_laplacian(g), [np.eye(3)])
    np.testing.assert_array_equal(Y.data, X)


@pytest.mark.parametrize("K", [1, 2, 3, 4, 6])
def test_edgeless_matches_dense(K):
    rng = np.random.default_rng(K)
    X = rng.normal(size=(5, 2))
    Ws = [rng.normal(size=(2, 3)) for _ in range(K)]
    Y = cheb_conv(X, scaled_laplacian(MeshTopology.build(5)), Ws)
    np.testing.assert_allclose(Y.data, _dense_cheb(np.zeros((5, 5)), X, Ws), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dense_spectral_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    g = _random_graph(n, 0.45, seed)
    cache = scaled_laplacian(g)
    X = rng.normal(size=(n, 3))
    Ws = [rng.normal(size=(3, 4)) for _ in range(6)]
    b = rng.normal(size=4)
    Y = cheb_conv(X, cache, Ws, b)
    ref = _dense_cheb(cache.L.toarray(), X, Ws) + b
    assert np.max(np.abs(Y.data - ref)) < 1e-8


def test_batched_matches_unbatched():
    g = _random_graph(8, 0.5, 2)
    cache = scaled_laplacian(g)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 8, 2))
    Ws = [rng.normal(size=(2, 2)) for _ in range(4)]
    Yb = cheb_conv(X, cache, Ws).data
    for i in range(3):
        np.testing.assert_allclose(Yb[i], cheb_conv(X[i], cache, Ws).data, atol=1e-13)


def test_linearity_and_permutation():
    rng = np.random.default_rng(7)
    g = _random_graph(9, 0.4, 7)
    cache = scaled_laplacian(g)
    Ws = [rng.normal(size=(2, 3)) for _ in range(6)]
    X1, X2 = rng.normal(size=(2, 9, 2))
    lhs = cheb_conv(2.5 * X1 - 0.7 * X2, cache, Ws).data
    rhs = 2.5 * cheb_conv(X1, cache, Ws).data - 0.7 * cheb_conv(X2, cache, Ws).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10

    perm = rng.permutation(9)
    inv = np.argsort(perm)
    g2 = MeshTopology.build(9, edges=inv[g.edges])
    Y = cheb_conv(X1, cache, Ws).data
    Yp = cheb_conv(X1[perm], scaled_laplacian(g2), Ws).data
    np.testing.assert_allclose(Yp, Y[perm], atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_x_and_w(seed):
    rng = np.random.default_rng(seed)
    cache = scaled_laplacian(_random_graph(6, 0.5, seed))
    X = rng.normal(size=(6, 2))
    Ws = [rng.normal(size=(2, 3)) for _ in range(3)]
    R = rng.normal(size=(6, 3))
    assert grad_check(lambda x: sum_(cheb_conv(x, cache, Ws) * R), X) < 1e-4
    for k in range(3):
        def f(w, k=k):
            ws = list(Ws)
            ws[k] = w
            return sum_(cheb_conv(X, cache, ws) * R)

        assert grad_check(f, Ws[k]) < 1e-4


def test_config_checks():
    cache = scaled_laplacian(_random_graph(4, 0.9, 0))
    with pytest.raises(ValueError):
        ChebLayerConfig(2, 3, K=0)
    with pytest.raises(ValueError, match="channels"):
        cheb_conv(np.zeros((4, 2)), cache, [np.zeros((3, 3))])
    with pytest.raises(ValueError, match="rows"):
        cheb_conv(np.zeros((5, 2)), cache, [np.zeros((2, 3))])
    cfg = ChebLayerConfig(2, 3, K=2, activation="relu")
    Y = cheb_conv(np.ones((4, 2)), cache, [np.ones((2, 3)), np.ones((2, 3))], -10.0, cfg)
    assert np.all(Y.data >= 0)


@pytest.fixture(scope="module")
def hier():
    v, f = icosphere(3)
    return build_hierarchy(MeshTopology.build(len(v), faces=f), v * 20.0)


def test_pool_unpool_apply(hier):
    c = np.full((hier.counts[2], 3), 4.0)
    np.testing.assert_allclose(apply_unpool(c, hier, 2).data, np.full((hier.counts[1], 3), 4.0), atol=1e-12)
    X = hier.coords[0]
    rt = apply_unpool(apply_pool(X, hier, 1), hier, 1).data
    e = hier.topologies[0].edges
    mean_edge = np.linalg.norm(X[e[:, 0]] - X[e[:, 1]], axis=1).mean()
    assert np.max(np.abs(rt - X)) < mean_edge
    with pytest.raises(ValueError):
        apply_pool(X[:10], hier, 1)
    with pytest.raises(ValueError):
        apply_unpool(X, hier, 5)


def test_unpool_gradient_is_column_sums(hier):
    x = DiffValue(np.random.default_rng(0).normal(size=(hier.counts[1], 2)), requires_grad=True)
    backward(sum_(apply_unpool(x, hier, 1)))
    colsum = np.asarray(hier.unpool(1).sum(axis=0)).ravel()
    np.testing.assert_allclose(x.grad, np.repeat(colsum[:, None], 2, axis=1), atol=1e-12)
