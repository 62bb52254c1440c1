"""Siamese identity discriminator and the skip-connected privatizing generator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigurationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class DiscriminatorConfig:
    input_size: int = 64
    input_channels: int = 1
    conv_channels: tuple = (16, 32, 64)
    embedding_dim: int = 15
    dense_units: int = 500
    leaky_slope: float = 0.1
    dropout_p: float = 0.2
    margin: float = 2.0
    pool_after_block: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != 3:
            raise ConfigurationError("conv_channels must list exactly 3 widths")
        if self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be >= 1")
        if not 0 < self.dropout_p < 1:
            raise ConfigurationError("dropout_p must lie in (0, 1)")
        if self.margin <= 0:
            raise ConfigurationError("margin must be positive")
        if self.feature_size() < 1:
            raise ConfigurationError(f"input_size {self.input_size} too small for 3 conv blocks")

    def feature_size(self) -> int:
        """Spatial side length after the three conv blocks."""
        size = self.input_size
        for _ in range(3):
            size -= 2
            if self.pool_after_block:
                size //= 2
        return size

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class GeneratorConfig:
    input_size: int = 64
    input_channels: int = 1
    base_channels: int = 16
    noise_std: float = 1.0
    dropout_p: float = 0.5
    leaky_slope: float = 0.1
    passthrough: bool = False  # identity privatizer, used as an evaluation baseline

    def __post_init__(self):
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigurationError(f"generator input_size must be a positive multiple of 32, got {self.input_size}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError("dropout_p must lie in [0, 1)")

    @property
    def encoder_channels(self):
        return [self.base_channels * 2**k for k in range(5)]

    @property
    def bottleneck_shape(self):
        side = self.input_size // 32
        return (self.base_channels * 16, side, side)

    def to_dict(self):
        return asdict(self)


class Discriminator(nn.Module):
    """One Siamese branch; both images of a pair go through the same weights."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = cfg.input_channels
        for out_ch in cfg.conv_channels:
            layers = [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=0),
                nn.LeakyReLU(cfg.leaky_slope),
                nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
                nn.Dropout(cfg.dropout_p),
            ]
            if cfg.pool_after_block:
                layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.features = nn.Sequential(*blocks)
        side = cfg.feature_size()
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_ch * side * side, cfg.dense_units),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(cfg.dense_units, cfg.dense_units),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(cfg.dense_units, cfg.embedding_dim),
        )

    def _check(self, x):
        c, s = self.cfg.input_channels, self.cfg.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, s, s):
            raise ConfigurationError(f"discriminator expects (N, {c}, {s}, {s}) input, got {tuple(x.shape)}")

    def embed(self, x):
        self._check(x)
        return self.head(self.features(x))

    def forward(self, a, b):
        """Probability that ``a`` and ``b`` show the same identity."""
        return similarity_probability(self.embed(a), self.embed(b), self.cfg.margin)


def discriminator_embed(disc: Discriminator, images, mode="eval"):
    """Embed a batch in TRAIN or EVAL mode, restoring the module's prior mode."""
    was_training = disc.training
    disc.train(mode == "train")
    try:
        return disc.embed(images)
    finally:
        disc.train(was_training)


def squared_distance(o1, o2):
    return ((o1 - o2) ** 2).sum(dim=-1)


def similarity_probability(o1, o2, margin):
    """(1 + e^-m) / (1 + e^(d^2 - m)) with d the Euclidean embedding distance.

    Evaluated in log space so large distances underflow to 0 rather than nan.
    """
    o1 = torch.as_tensor(o1)
    o2 = torch.as_tensor(o2)
    if o1.shape[-1] != o2.shape[-1]:
        raise ConfigurationError("embeddings must have equal length")
    d2 = squared_distance(o1, o2)
    log_p = math.log1p(math.exp(-margin)) - nn.functional.softplus(d2 - margin)
    return torch.exp(log_p)


class _Down(nn.Sequential):
    def __init__(self, in_ch, out_ch, slope):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(slope),
            nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
        )


class _Up(nn.Sequential):
    def __init__(self, in_ch, out_ch, slope, dropout_p):
        super().__init__(
            nn.ConvTranspose2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(slope),
            nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.Dropout(dropout_p),
        )


class Generator(nn.Module):
    """Five-level encoder/decoder with bypasses and additive bottleneck noise.

    Decoder block k takes the previous decoder output concatenated with the
    mirror encoder map; the last transpose conv maps straight to image
    channels and goes through tanh.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_channels
        slope = cfg.leaky_slope
        self.down = nn.ModuleList()
        in_ch = cfg.input_channels
        for out_ch in enc:
            self.down.append(_Down(in_ch, out_ch, slope))
            in_ch = out_ch
        # decoder: 16C -> 8C -> 4C -> 2C -> C, each input widened by its bypass
        self.up = nn.ModuleList()
        self.up.append(_Up(enc[4], enc[3], slope, cfg.dropout_p))
        for k in (3, 2, 1):
            self.up.append(_Up(enc[k] * 2, enc[k - 1], slope, cfg.dropout_p))
        self.final = nn.ConvTranspose2d(enc[0] * 2, cfg.input_channels, kernel_size=4, stride=2, padding=1)
        self.out_act = nn.Tanh()

    @property
    def bottleneck_shape(self):
        return self.cfg.bottleneck_shape

    def forward(self, x, z):
        c, s = self.cfg.input_channels, self.cfg.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, s, s):
            raise ConfigurationError(f"generator expects (N, {c}, {s}, {s}) input, got {tuple(x.shape)}")
        if z is None or tuple(z.shape) != (x.shape[0], *self.bottleneck_shape):
            got = None if z is None else tuple(z.shape)
            raise ConfigurationError(f"noise shape {got} != bottleneck {(x.shape[0], *self.bottleneck_shape)}")
        if self.cfg.passthrough:
            return x.clamp(-1 + 1e-6, 1 - 1e-6)
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        h = h + z
        h = self.up[0](h)
        for block, skip in zip(self.up[1:], reversed(skips[1:4])):
            h = block(torch.cat([h, skip], dim=1))
        h = self.final(torch.cat([h, skips[0]], dim=1))
        return self.out_act(h)


def generator_forward(gen: Generator, images, z, mode="eval"):
    was_training = gen.training
    gen.train(mode == "train")
    try:
        return gen(images, z)
    finally:
        gen.train(was_training)


def sample_noise(shape, noise_std, seed, dtype=torch.float32):
    """Gaussian bottleneck noise, reproducible from ``seed``."""
    if noise_std < 0:
        raise ConfigurationError("noise_std must be non-negative")
    if noise_std == 0:
        return torch.zeros(shape, dtype=dtype)
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed) % 2**63)
    return torch.randn(shape, generator=g, dtype=dtype) * noise_std


@dataclass
class ModelParams:
    """Serializable weights of both networks plus their configs."""

    generator_weights: dict
    discriminator_weights: dict
    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    extra_config: dict = field(default_factory=dict)
    format_version: int = 1

    @classmethod
    def from_modules(cls, gen: Generator, disc: Discriminator, extra_config=None):
        return cls(
            generator_weights={k: v.detach().cpu().clone() for k, v in gen.state_dict().items()},
            discriminator_weights={k: v.detach().cpu().clone() for k, v in disc.state_dict().items()},
            generator_config=gen.cfg,
            discriminator_config=disc.cfg,
            extra_config=dict(extra_config or {}),
        )

    def build(self):
        """Instantiate ``(Generator, Discriminator)`` in EVAL mode with these weights."""
        gen = Generator(self.generator_config)
        disc = Discriminator(self.discriminator_config)
        _load_state(gen, self.generator_weights)
        _load_state(disc, self.discriminator_weights)
        return gen.eval(), disc.eval()

    def config_snapshot(self):
        return {
            "generator": self.generator_config.to_dict(),
            "discriminator": self.discriminator_config.to_dict(),
            "extra": self.extra_config,
        }


def _load_state(module, weights):
    expected = module.state_dict()
    missing = set(expected) - set(weights)
    if missing:
        raise ConfigurationError(f"missing weights: {sorted(missing)}")
    for name, ref in expected.items():
        arr = torch.as_tensor(weights[name])
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigurationError(f"weight {name} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}")
    module.load_state_dict({k: torch.as_tensor(weights[k]).to(expected[k].dtype) for k in expected})


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int):
    """Freshly initialised networks; initial weights depend only on ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = Generator(gen_cfg)
        disc = Discriminator(disc_cfg)
    return gen, disc
