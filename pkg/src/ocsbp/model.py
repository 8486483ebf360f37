"""The object-centric VAE: backbone, attention and feature heads, slot
pooling, posterior head, spatial-broadcast decoder and priors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import SemiConvHead, coordinate_grid, zero_init_embedding_head
from .icsbp import AttentionMaskSet, FixedK, StopPolicy, icsbp_cluster
from .kernels import DistanceKernel, KernelKind
from .likelihood import DiagGaussian, SceneComponents
from .nn import Conv2d, ConvGNReLU, LayerNorm, Linear, LSTMCell, Module, Parameter, RngState
from .tensor import Tensor

LOG_STD_RANGE = (-6.0, 3.0)
POOL_EPS = 1e-5
DECODER_UPSAMPLINGS = 4
PRIORS = ("autoregressive", "independent")


class GenerationError(RuntimeError):
    """Scene sampling was requested from a model without a learned prior."""


@dataclass
class ModelConfig:
    image_size: tuple = (32, 32)
    channels: int = 3
    k_train: int = 5
    latent_dim: int = 32
    backbone_widths: tuple = (32, 32, 64)
    backbone_hidden: int = 128
    feature_channels: int = 32  # D_e
    pooled_channels: int = 64  # D_f
    embedding_dim: int = 8
    head_width: int = 32
    posterior_hidden: int = 128
    decoder_width: int = 32
    prior_hidden: int = 256
    kernel: KernelKind = KernelKind.GAUSSIAN
    prior: str = "autoregressive"
    groups: int = 8

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.backbone_widths = tuple(int(v) for v in self.backbone_widths)
        self.kernel = KernelKind.parse(self.kernel)
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        factor = max(2 ** len(self.backbone_widths), 2**DECODER_UPSAMPLINGS)
        for n in (h, w):
            if n < factor or n & (n - 1):
                raise ValueError(f"image size {self.image_size} must be powers of two >= {factor}")
        if self.latent_dim < 1 or self.k_train < 2:
            raise ValueError("need latent_dim >= 1 and k_train >= 2")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2 to hold pixel coordinates")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["backbone_widths"] = list(self.backbone_widths)
        d["kernel"] = self.kernel.value
        return d


PRESETS = {
    "desk32": ModelConfig(),
    "paper64": ModelConfig(
        image_size=(64, 64),
        k_train=7,
        latent_dim=64,
        backbone_widths=(64, 64, 128, 128, 128),
        feature_channels=64,
        pooled_channels=128,
        head_width=64,
        decoder_width=64,
    ),
}


# building blocks --------------------------------------------------------


class UNetBackbone(Module):
    """Stride-2 Conv-GN-ReLU encoder, MLP bottleneck, transposed-conv decoder with skips."""

    def __init__(self, cfg: ModelConfig, rng: RngState):
        widths = cfg.backbone_widths
        g = cfg.groups
        self.down = []
        c_prev = cfg.channels
        for c in widths:
            self.down.append(ConvGNReLU(c_prev, c, 3, rng, stride=2, groups=g))
            c_prev = c
        h, w = cfg.image_size
        scale = 2 ** len(widths)
        self.bottleneck_shape = (h // scale, w // scale, widths[-1])
        flat = int(np.prod(self.bottleneck_shape))
        self.mlp = [Linear(flat, cfg.backbone_hidden, rng),
                    Linear(cfg.backbone_hidden, cfg.backbone_hidden, rng),
                    Linear(cfg.backbone_hidden, flat, rng)]
        self.up = []
        c_in = widths[-1]
        for i in reversed(range(len(widths))):
            c_out = widths[i - 1] if i > 0 else widths[0]
            self.up.append(ConvGNReLU(c_in + widths[i], c_out, 3, rng, stride=2, transpose=True, groups=g))
            c_in = c_out
        self.out = Conv2d(widths[0], cfg.feature_channels, 1, rng)

    def forward(self, x):
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        b = h.shape[0]
        u = T.reshape(h, (b, -1))
        for layer in self.mlp:
            u = T.relu(layer(u))
        u = T.reshape(u, (b,) + self.bottleneck_shape)
        for block, skip in zip(self.up, reversed(skips)):
            u = block(T.concatenate([u, skip], axis=-1))
        return self.out(u)


class FeatureHead(Module):
    def __init__(self, c_in: int, width: int, c_out: int, rng: RngState, groups: int = 8):
        self.block = ConvGNReLU(c_in, width, 3, rng, groups=groups)
        self.out = Conv2d(width, c_out, 1, rng)

    def forward(self, e):
        return self.out(self.block(e))


def pool_slot_features(features, masks) -> Tensor:
    """Mask-weighted spatial mean: (B, H, W, D) features, (B, K, H, W) masks -> (B, K, D)."""
    feats = T._lift(features)
    m = masks.masks if isinstance(masks, AttentionMaskSet) else T._lift(masks)
    if m.shape[-3] == 0:
        raise ValueError("pool_slot_features: mask set is empty")
    if m.shape[:-3] + m.shape[-2:] != feats.shape[:-1]:
        raise T.ShapeError("pool_slot_features", feats.shape, m.shape)
    lead = feats.shape[:-3]
    hw = feats.shape[-3] * feats.shape[-2]
    m_flat = T.reshape(m, lead + (m.shape[-3], hw))
    f_flat = T.reshape(feats, lead + (hw, feats.shape[-1]))
    total = T.sum_(m_flat, axis=-1, keepdims=True)
    return T.matmul(m_flat, f_flat) / (total + POOL_EPS)


def split_gaussian(stats) -> DiagGaussian:
    d = stats.shape[-1] // 2
    return DiagGaussian(stats[..., :d], T.clip(stats[..., d:], *LOG_STD_RANGE))


class PosteriorHead(Module):
    def __init__(self, c_in: int, hidden: int, latent_dim: int, rng: RngState):
        self.norm = LayerNorm(c_in)
        self.fc = Linear(c_in, hidden, rng)
        self.out = Linear(hidden, 2 * latent_dim, rng)

    def forward(self, slots) -> DiagGaussian:
        return split_gaussian(self.out(T.relu(self.fc(self.norm(slots)))))


class BroadcastDecoder(Module):
    """Spatial broadcast of each latent at H/16 then four stride-2 5x5 transposed convs."""

    def __init__(self, cfg: ModelConfig, rng: RngState):
        h, w = cfg.image_size
        scale = 2**DECODER_UPSAMPLINGS
        self.grid_shape = (h // scale, w // scale)
        width = cfg.decoder_width
        c_in = cfg.latent_dim + 2
        self.layers = []
        for _ in range(DECODER_UPSAMPLINGS):
            self.layers.append(ConvGNReLU(c_in, width, 5, rng, stride=2, transpose=True, groups=cfg.groups))
            c_in = width
        self.out = Conv2d(width, cfg.channels + 1, 1, rng)
        self.channels = cfg.channels

    def forward(self, z) -> SceneComponents:
        z = T._lift(z)
        b, k, d = z.shape
        gh, gw = self.grid_shape
        flat = T.reshape(z, (b * k, 1, 1, d))
        tiled = T.broadcast_to(flat, (b * k, gh, gw, d))
        coords = np.broadcast_to(coordinate_grid(gh, gw, z.dtype), (b * k, gh, gw, 2))
        h = T.concatenate([tiled, Tensor(coords)], axis=-1)
        for layer in self.layers:
            h = layer(h)
        h = self.out(h)
        h = T.reshape(h, (b, k) + h.shape[1:])
        means = T.sigmoid(h[..., : self.channels])
        logits = h[..., self.channels]
        return SceneComponents(means, logits)


class AutoregressivePrior(Module):
    """LSTM over slots: p(z_k | z_<k) from z_{k-1}, with a zero input at k = 1."""

    def __init__(self, latent_dim: int, hidden: int, rng: RngState):
        self.cell = LSTMCell(latent_dim, hidden, rng)
        self.out = Linear(hidden, 2 * latent_dim, rng)
        self.h0 = Parameter(np.zeros(hidden))
        self.c0 = Parameter(np.zeros(hidden))
        self.latent_dim = latent_dim

    def initial_state(self, batch: int):
        n = self.h0.shape[0]
        return (T.broadcast_to(self.h0, (batch, n)), T.broadcast_to(self.c0, (batch, n)))

    def step(self, z_prev, state):
        h, c = self.cell(z_prev, state)
        return split_gaussian(self.out(h)), (h, c)

    def forward(self, z) -> DiagGaussian:
        z = T._lift(z)
        b, k, d = z.shape
        state = self.initial_state(b)
        z_prev = Tensor(np.zeros((b, d), dtype=z.dtype))
        means, log_stds = [], []
        for i in range(k):
            dist, state = self.step(z_prev, state)
            means.append(dist.mean)
            log_stds.append(dist.log_std)
            z_prev = z[:, i]
        return DiagGaussian(T.stack(means, axis=1), T.stack(log_stds, axis=1))


# the model ----------------------------------------------------------------


@dataclass
class SlotLatents:
    posterior: DiagGaussian
    samples: Tensor
    prior: DiagGaussian


@dataclass
class EncodeResult:
    attention: AttentionMaskSet
    latents: SlotLatents
    components: SceneComponents
    reconstruction: Tensor
    extras: dict = field(default_factory=dict, repr=False)


class SceneVAE(Module):
    def __init__(self, config: ModelConfig, rng: RngState):
        self.config = config
        c = config
        self.backbone = UNetBackbone(c, rng)
        self.attention_head = SemiConvHead(c.feature_channels, rng, width=c.head_width, out_dim=c.embedding_dim)
        zero_init_embedding_head(self.attention_head)
        self.kernel = DistanceKernel(c.kernel, c.k_train)
        self.feature_head = FeatureHead(c.feature_channels, c.head_width, c.pooled_channels, rng, c.groups)
        self.posterior = PosteriorHead(c.pooled_channels, c.posterior_hidden, c.latent_dim, rng)
        self.decoder = BroadcastDecoder(c, rng)
        self.prior = AutoregressivePrior(c.latent_dim, c.prior_hidden, rng) if c.prior == "autoregressive" else None

    def _image(self, x) -> Tensor:
        x = T._lift(x)
        if x.ndim == 3:
            x = T.expand_dims(x, 0)
        if x.shape[1:] != tuple(self.config.image_size) + (self.config.channels,):
            raise T.ShapeError("encode", x.shape, tuple(self.config.image_size) + (self.config.channels,))
        return x

    def backbone_encode(self, x) -> Tensor:
        return self.backbone(self._image(x))

    def prior_params(self, z) -> DiagGaussian:
        z = T._lift(z)
        if self.prior is None:
            return DiagGaussian.standard(z.shape, z.dtype)
        return self.prior(z)

    def decode_components(self, z) -> SceneComponents:
        return self.decoder(z)

    def encode(self, x, policy: StopPolicy | None = None, rng: RngState | None = None) -> EncodeResult:
        policy = policy or FixedK(self.config.k_train)
        rng = rng or RngState(0)
        x = self._image(x)
        e = self.backbone(x)
        zeta = self.attention_head(e)
        attention = icsbp_cluster(zeta, self.kernel, policy, rng)
        f = self.feature_head(e)
        slots = pool_slot_features(f, attention.masks)
        q = self.posterior(slots)
        z = q.sample(rng)
        p = self.prior_params(z)
        comps = self.decode_components(z)
        recon = comps.mixture_mean()
        return EncodeResult(attention, SlotLatents(q, z, p), comps, recon, {"embeddings": zeta})

    def generate(self, K: int, rng: RngState, batch: int = 1, require_learned_prior: bool = False):
        """Ancestral sample of K slots; returns (images (B, H, W, C), components)."""
        if K < 1:
            raise ValueError("generate: K must be >= 1")
        d = self.config.latent_dim
        dtype = T.get_default_dtype()
        if self.prior is None:
            if require_learned_prior:
                raise GenerationError("model was trained with an independent prior; no learned prior to sample from")
            z = Tensor(rng.normal((batch, K, d)).astype(dtype))
        else:
            state = self.prior.initial_state(batch)
            z_prev = Tensor(np.zeros((batch, d), dtype=dtype))
            zs = []
            for _ in range(K):
                dist, state = self.prior.step(z_prev, state)
                z_prev = dist.sample(rng)
                zs.append(z_prev)
            z = T.stack(zs, axis=1)
        comps = self.decode_components(z)
        return comps.mixture_mean(), comps


def build_model(config: ModelConfig, seed: int = 0) -> SceneVAE:
    return SceneVAE(config, RngState(seed))


def encode(model: SceneVAE, x, policy: StopPolicy, rng: RngState) -> EncodeResult:
    return model.encode(x, policy, rng)


def generate_scene(model: SceneVAE, K: int, rng: RngState, require_learned_prior: bool = False):
    images, comps = model.generate(K, rng, require_learned_prior=require_learned_prior)
    return images, comps
