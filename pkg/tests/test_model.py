import numpy as np
import pytest
import scipy.sparse as sp

from hybridmesh.autodiff import DiffValue, backward, grad_check, mean, mul, sum_
from hybridmesh.losses import LossWeights, ds_targets, total_loss
from hybridmesh.mesh import MeshTopology, PoolHierarchy, build_hierarchy, icosphere
from hybridmesh.model import (
    DecoderConfig, EncoderConfig, HybridVNet, LatentDistribution, ModelConfig, reparameterize,
)


def _mini_hierarchy():
    v, f = icosphere(0)
    top = MeshTopology.build(12, faces=f)

    def level(n_in, n_out, rng):
        P = sp.csr_matrix((np.ones(n_out), (np.arange(n_out), np.arange(n_out))), shape=(n_out, n_in))
        rows, cols, vals = list(range(n_out)), list(range(n_out)), [1.0] * n_out
        for r in range(n_out, n_in):
            pick = rng.choice(n_out, 2, replace=False)
            w = rng.uniform(0.2, 0.8)
            rows += [r, r]
            cols += list(pick)
            vals += [w, 1 - w]
        U = sp.csr_matrix((vals, (rows, cols)), shape=(n_in, n_out))
        return P, U

    rng = np.random.default_rng(0)
    P1, U1 = level(12, 6, rng)
    P2, U2 = level(6, 3, rng)
    t1 = MeshTopology.build(6, edges=[[i, (i + 1) % 6] for i in range(6)] + [[0, 3]])
    t2 = MeshTopology.build(3, edges=[[0, 1], [1, 2], [2, 0]])
    return PoolHierarchy([P1, P2], [U1, U2], [top, t1, t2], [v, v[:6], v[:3]])


MINI_ENC = EncoderConfig(
    blocks=2, channels_3d=(2, 3), channels_2d=(2, 3), latent_sax=3, latent_lax=2, z_pool_block=1,
    sax_shape=(4, 4, 2), lax_shape=(4, 4),
)
MINI_DEC = DecoderConfig(channels=(3, 2, 2), K=3)


def _mini(mode="multi_view", seed=0):
    return HybridVNet(ModelConfig(mode=mode, encoder=MINI_ENC, decoder=MINI_DEC), _mini_hierarchy(), seed=seed)


def _inputs(rng, B=2, enc=MINI_ENC):
    sax = rng.uniform(size=(B, 1) + enc.sax_shape)
    lax = [rng.uniform(size=(B, 1) + enc.lax_shape) for _ in range(enc.n_lax)]
    return sax, lax


def test_latent_dims():
    assert ModelConfig().latent_dim == 56
    assert ModelConfig(mode="single_view").latent_dim == 32
    m = _mini()
    dist = m.encode(*_inputs(np.random.default_rng(0)))
    assert dist.mu.shape == (2, 3 + 3 * 2) == dist.log_var.shape
    s = _mini("single_view")
    dist = s.encode(_inputs(np.random.default_rng(0))[0])
    assert dist.mu.shape == (2, 3)


def test_default_config_shapes():
    v, f = icosphere(3)
    h = build_hierarchy(MeshTopology.build(len(v), faces=f), v * 30)
    m = HybridVNet(ModelConfig(mode="multi_view"), h)
    z = np.zeros((1, 56))
    out = m.decode(z)
    assert out.final.shape == (1, 642, 3)
    assert {k: v.shape[1] for k, v in out.aux.items()} == {1: h.counts[1], 2: h.counts[2], 3: h.counts[3], 4: h.counts[4]}
    d = m.describe()
    assert d["latent_dim"] == 56 and d["n_parameters"] == HybridVNet(ModelConfig(mode="multi_view"), h).describe()["n_parameters"]
    single = HybridVNet(ModelConfig(mode="single_view"), h)
    shared = [k for k in m.params if k.startswith("decoder.") and k != "decoder.fc.W"]
    assert all(m.params[k].shape == single.params[k].shape for k in shared)
    assert sum(k.startswith("decoder.cheb") for k in m.params) == 5 * 7 + 6  # 5 hidden (K weights + bias), final has no bias
    assert "decoder.cheb6.bias" not in m.params


def test_zero_input_finite():
    m = _mini()
    sax, lax = _inputs(np.random.default_rng(1))
    out, dist = m(np.zeros_like(sax), [np.zeros_like(x) for x in lax])
    assert np.all(np.isfinite(out.final.data)) and np.all(np.isfinite(dist.mu.data))


def test_reparameterize():
    mu = DiffValue(np.array([[0.5, -1.0]]))
    lv = DiffValue(np.array([[0.3, 0.1]]))
    d = LatentDistribution(mu, lv)
    assert reparameterize(d, False) is mu
    a = reparameterize(d, True, np.random.default_rng(3)).data
    b = reparameterize(d, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    tiny = LatentDistribution(mu, DiffValue(np.full((1, 2), -10.0)))
    assert np.max(np.abs(reparameterize(tiny, True, np.random.default_rng(0)).data - mu.data)) < 0.05
    with pytest.raises(ValueError):
        reparameterize(d, True, None)


def test_logvar_clamped():
    m = _mini()
    m.params["encoder.sax.head.b"].data[3:] = 50.0
    dist = m.encode(*_inputs(np.random.default_rng(2)))
    assert dist.log_var.data.max() <= 10.0


def test_inference_determinism_and_purity():
    m = _mini()
    sax, lax = _inputs(np.random.default_rng(4))
    a, _ = m(sax, lax)
    b, _ = m(sax, lax)
    assert a.final.data.tobytes() == b.final.data.tobytes()
    z = np.random.default_rng(5).normal(size=(2, 9))
    assert m.decode(z).final.data.tobytes() == m.decode(z).final.data.tobytes()


def test_branch_independence():
    m = _mini()
    sax, lax = _inputs(np.random.default_rng(6))
    base = m.encode(sax, lax).mu.data
    lax2 = list(lax)
    lax2[1] = np.zeros_like(lax[1])
    changed = m.encode(sax, lax2).mu.data
    diff = np.abs(changed - base).max(axis=0) > 0
    # layout: [sax 3 | lax0 2 | lax1 2 | lax2 2]
    assert not diff[:5].any() and not diff[7:].any() and diff[5:7].any()


def test_shape_errors():
    m = _mini()
    sax, lax = _inputs(np.random.default_rng(7))
    with pytest.raises(ValueError, match="SAX"):
        m.encode(sax[:, :, :3], lax)
    with pytest.raises(ValueError, match="LAX"):
        m.encode(sax, lax[:2])
    with pytest.raises(ValueError, match="latent"):
        m.decode(np.zeros((1, 4)))


def test_mini_model_grad_check():
    """Every parameter tensor of a miniature model passes finite differences."""
    m = _mini(seed=3)
    rng = np.random.default_rng(8)
    sax, lax = _inputs(rng)
    h = m.hierarchy
    gt = rng.uniform(size=(2, 12, 3))
    targets = ds_targets(h, gt)
    weights = LossWeights(lambda_kl=0.1, lambda_ds=1.0, reg_kind="edge", lambda_reg=0.05)
    topo = h.topologies[0]

    def loss_with(name):
        def f(x):
            saved = m.params[name]
            m.params[name] = x
            try:
                out, dist = m(sax, lax, training=True, rng=np.random.default_rng(11))
                return total_loss(out, dist, gt, weights, topo, gt_levels=targets).total
            finally:
                m.params[name] = saved
        return f

    worst = 0.0
    for name, p in m.params.items():
        worst = max(worst, grad_check(loss_with(name), p.data))
    assert worst < 1e-4

    # and with respect to the input image
    def f_img(x):
        out, dist = m(x, lax, training=False)
        return mean(mul(out.final, out.final))

    assert grad_check(f_img, sax) < 1e-4


def test_backward_reaches_every_parameter():
    m = _mini()
    sax, lax = _inputs(np.random.default_rng(9))
    out, dist = m(sax, lax, training=True, rng=np.random.default_rng(0))
    loss = sum_(out.final)
    for a in out.aux.values():
        loss = loss + sum_(a)
    backward(loss + sum_(dist.log_var))
    missing = [k for k, p in m.params.items() if p.grad is None]
    assert not missing
