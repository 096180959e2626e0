"""HybridVNet: residual image encoders, a joint Gaussian latent, and a
Chebyshev graph decoder with deep supervision at every hierarchy level."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DiffValue, add, clip, concat, conv2d, conv3d, exp, index, layer_norm, matmul, maxpool2d, maxpool3d,
    mul, relu, reshape,
)
from .graph import GraphOperatorCache, apply_unpool, cheb_conv, scaled_laplacian
from .mesh.hierarchy import PoolHierarchy

LOGVAR_RANGE = (-10.0, 10.0)
MODES = ("single_view", "multi_view")


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 6
    channels_3d: tuple[int, ...] = (8, 16, 16, 32, 32, 64)
    channels_2d: tuple[int, ...] = (16, 32, 32, 64, 64, 128)
    latent_sax: int = 32
    latent_lax: int = 8
    z_pool_block: int = 3
    sax_shape: tuple[int, int, int] = (40, 40, 12)
    lax_shape: tuple[int, int] = (96, 96)
    n_lax: int = 3

    def __post_init__(self):
        if len(self.channels_3d) != self.blocks or len(self.channels_2d) != self.blocks:
            raise ValueError(f"channel schedules must have {self.blocks} entries")
        if not 1 <= self.z_pool_block < self.blocks:
            raise ValueError("z_pool_block must fall between two residual blocks")


@dataclass(frozen=True)
class DecoderConfig:
    channels: tuple[int, ...] = (32, 32, 16, 16, 8)
    K: int = 6


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "multi_view"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def latent_dim(self) -> int:
        e = self.encoder
        return e.latent_sax + (e.n_lax * e.latent_lax if self.mode == "multi_view" else 0)


@dataclass
class LatentDistribution:
    mu: DiffValue
    log_var: DiffValue

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")


@dataclass
class DecoderOutputs:
    final: DiffValue
    aux: dict[int, DiffValue]  # hierarchy level -> prediction at that level


def reparameterize(dist: LatentDistribution, training: bool, rng: np.random.Generator | None = None) -> DiffValue:
    if not training:
        return dist.mu
    if rng is None:
        raise ValueError("training-mode sampling needs an explicit rng")
    eps = rng.standard_normal(dist.mu.shape)
    return add(dist.mu, mul(exp(mul(dist.log_var, 0.5)), eps))


def _pool_schedule(cfg: EncoderConfig, nd: int) -> list[tuple[int, ...]]:
    """Kernel applied after each block except the last."""
    if nd == 2:
        return [(2, 2)] * (cfg.blocks - 1)
    return [(2, 2, 2) if b + 1 == cfg.z_pool_block else (2, 2, 1) for b in range(cfg.blocks - 1)]


def _out_shape(shape, pools):
    s = list(shape)
    for k in pools:
        s = [n // kk for n, kk in zip(s, k)]
    if min(s) < 1:
        raise ValueError(f"input shape {tuple(shape)} too small for {len(pools)} pooling stages")
    return s


class HybridVNet:
    """Parameters live in a flat ``name -> DiffValue`` dict (``self.params``)."""

    def __init__(self, config: ModelConfig, hierarchy: PoolHierarchy, seed: int = 0):
        self.config = config
        self.hierarchy = hierarchy
        self.caches: list[GraphOperatorCache] = [scaled_laplacian(t) for t in hierarchy.topologies]
        n_levels = hierarchy.n_levels
        if len(config.decoder.channels) != n_levels + 1:
            raise ValueError(
                f"decoder needs {n_levels + 1} channel entries for a {n_levels}-level hierarchy, "
                f"got {config.decoder.channels}"
            )
        self.params: dict[str, DiffValue] = {}
        rng = np.random.default_rng(seed)
        e = config.encoder
        self._branch("encoder.sax", 1, e.channels_3d, 3, rng)
        flat = e.channels_3d[-1] * int(np.prod(_out_shape(e.sax_shape, _pool_schedule(e, 3))))
        self._dense("encoder.sax.head", flat, 2 * e.latent_sax, rng)
        if config.mode == "multi_view":
            flat2 = e.channels_2d[-1] * int(np.prod(_out_shape(e.lax_shape, _pool_schedule(e, 2))))
            for b in range(e.n_lax):
                self._branch(f"encoder.lax{b}", 1, e.channels_2d, 2, rng)
                self._dense(f"encoder.lax{b}.head", flat2, 2 * e.latent_lax, rng)
        d = config.decoder
        self._dense("decoder.fc", config.latent_dim, hierarchy.counts[-1] * d.channels[0], rng)
        cin = d.channels[0]
        for i, cout in enumerate(d.channels, start=1):
            self._cheb(f"decoder.cheb{i}", cin, cout, d.K, rng, bias=True)
            self._param(f"decoder.ln{i}.gamma", np.ones(cout))
            self._param(f"decoder.ln{i}.beta", np.zeros(cout))
            cin = cout
        for level in range(n_levels, 0, -1):
            self._cheb(f"decoder.aux{level}", d.channels[n_levels - level], 3, 1, rng, bias=False)
        self._cheb(f"decoder.cheb{len(d.channels) + 1}", cin, 3, d.K, rng, bias=False)

    # ------------------------------------------------------------ parameters

    def _param(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = DiffValue(np.asarray(value, np.float64), requires_grad=True, name=name)

    def _dense(self, name, fan_in, fan_out, rng):
        self._param(f"{name}.W", rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _cheb(self, name, cin, cout, K, rng, bias):
        std = np.sqrt(2.0 / (K * cin))
        for k in range(K):
            self._param(f"{name}.W{k}", rng.normal(0.0, std, (cin, cout)))
        if bias:
            self._param(f"{name}.bias", np.zeros(cout))

    def _branch(self, prefix, cin, channels, nd, rng):
        ksz = (3,) * nd
        for b, cout in enumerate(channels, start=1):
            p = f"{prefix}.block{b}"
            self._param(f"{p}.conv1.W", rng.normal(0.0, np.sqrt(2.0 / (cin * 3 ** nd)), (cout, cin) + ksz))
            self._param(f"{p}.conv2.W", rng.normal(0.0, np.sqrt(2.0 / (cout * 3 ** nd)), (cout, cout) + ksz))
            for j in (1, 2):
                self._param(f"{p}.ln{j}.gamma", np.ones(cout))
                self._param(f"{p}.ln{j}.beta", np.zeros(cout))
            if cin != cout:
                self._param(f"{p}.proj.W", rng.normal(0.0, np.sqrt(1.0 / cin), (cout, cin) + (1,) * nd))
            cin = cout

    def describe(self) -> dict:
        groups: dict[str, int] = {}
        for name, p in self.params.items():
            key = ".".join(name.split(".")[:2])
            groups[key] = groups.get(key, 0) + int(np.prod(p.shape))
        return {
            "mode": self.config.mode,
            "latent_dim": self.config.latent_dim,
            "vertices": self.hierarchy.counts[0],
            "level_counts": self.hierarchy.counts,
            "n_tensors": len(self.params),
            "n_parameters": int(sum(np.prod(p.shape) for p in self.params.values())),
            "groups": groups,
        }

    # ------------------------------------------------------------ encoder

    def _residual_block(self, x, p, nd):
        P = self.params
        conv = conv3d if nd == 3 else conv2d
        axes = tuple(range(1, nd + 2))
        h = conv(x, P[f"{p}.conv1.W"], padding=1)
        h = relu(layer_norm(h, P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"], axes=axes, channel_axis=1))
        h = conv(h, P[f"{p}.conv2.W"], padding=1)
        h = layer_norm(h, P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"], axes=axes, channel_axis=1)
        skip = conv(x, P[f"{p}.proj.W"]) if f"{p}.proj.W" in P else x
        return relu(add(h, skip))

    def _encode_branch(self, x, prefix, nd, latent):
        e = self.config.encoder
        pools = _pool_schedule(e, nd)
        pool = maxpool3d if nd == 3 else maxpool2d
        h = x
        for b in range(e.blocks):
            h = self._residual_block(h, f"{prefix}.block{b + 1}", nd)
            if b < len(pools):
                h = pool(h, pools[b])
        h = reshape(h, (h.shape[0], -1))
        out = add(matmul(h, self.params[f"{prefix}.head.W"]), self.params[f"{prefix}.head.b"])
        mu = index(out, (slice(None), slice(0, latent)))
        lv = clip(index(out, (slice(None), slice(latent, 2 * latent))), *LOGVAR_RANGE)
        return mu, lv

    def encode(self, sax, lax=None) -> LatentDistribution:
        """``sax``: (B, 1, X, Y, Z); ``lax``: sequence of (B, 1, H, W), one per view."""
        e = self.config.encoder
        sax = sax if isinstance(sax, DiffValue) else DiffValue(np.asarray(sax, np.float64))
        if tuple(sax.shape[2:]) != tuple(e.sax_shape) or sax.shape[1] != 1:
            raise ValueError(f"SAX input must be (B, 1, {', '.join(map(str, e.sax_shape))}), got {sax.shape}")
        mus, lvs = [], []
        mu, lv = self._encode_branch(sax, "encoder.sax", 3, e.latent_sax)
        mus.append(mu)
        lvs.append(lv)
        if self.config.mode == "multi_view":
            if lax is None or len(lax) != e.n_lax:
                raise ValueError(f"multi-view mode needs {e.n_lax} LAX images")
            for b, img in enumerate(lax):
                img = img if isinstance(img, DiffValue) else DiffValue(np.asarray(img, np.float64))
                if tuple(img.shape[2:]) != tuple(e.lax_shape) or img.shape[1] != 1:
                    raise ValueError(f"LAX input {b} must be (B, 1, {e.lax_shape[0]}, {e.lax_shape[1]}), got {img.shape}")
                mu, lv = self._encode_branch(img, f"encoder.lax{b}", 2, e.latent_lax)
                mus.append(mu)
                lvs.append(lv)
        if len(mus) == 1:
            return LatentDistribution(mus[0], lvs[0])
        return LatentDistribution(concat(mus, axis=1), concat(lvs, axis=1))

    # ------------------------------------------------------------ decoder

    def _graph_block(self, h, i, level):
        P = self.params
        K = self.config.decoder.K
        h = cheb_conv(h, self.caches[level], [P[f"decoder.cheb{i}.W{k}"] for k in range(K)], P[f"decoder.cheb{i}.bias"])
        h = layer_norm(h, P[f"decoder.ln{i}.gamma"], P[f"decoder.ln{i}.beta"], axes=(-2, -1), channel_axis=-1)
        return relu(h)

    def decode(self, z) -> DecoderOutputs:
        P = self.params
        H = self.hierarchy
        n = H.n_levels
        z = z if isinstance(z, DiffValue) else DiffValue(np.asarray(z, np.float64))
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"latent must be (B, {self.config.latent_dim}), got {z.shape}")
        c0 = self.config.decoder.channels[0]
        h = add(matmul(z, P["decoder.fc.W"]), P["decoder.fc.b"])
        h = reshape(h, (z.shape[0], H.counts[-1], c0))
        aux = {}
        for i, level in enumerate(range(n, 0, -1), start=1):
            h = self._graph_block(h, i, level)
            aux[level] = cheb_conv(h, self.caches[level], [P[f"decoder.aux{level}.W0"]])
            h = apply_unpool(h, H, level)
        h = self._graph_block(h, n + 1, 0)
        K = self.config.decoder.K
        final = cheb_conv(h, self.caches[0], [P[f"decoder.cheb{n + 2}.W{k}"] for k in range(K)])
        return DecoderOutputs(final, aux)

    def forward(self, sax, lax=None, training: bool = False, rng=None):
        dist = self.encode(sax, lax)
        return self.decode(reparameterize(dist, training, rng)), dist

    __call__ = forward
