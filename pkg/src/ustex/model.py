"""Texture autoencoder: backbone -> sparsemax texture channels -> kernel bank.

Images enter as ``(N, 1, H, W)`` tensors in [-1, 1]. The backbone emits K
per-pixel logits and a bottleneck feature map; sparsemax over the channel
axis turns the logits into per-pixel texture weights, and every channel is
convolved with its own kernel before a 1x1 tanh squash rebuilds intensity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError


@dataclass
class TextureConfig:
    num_channels: int = 5
    kernel_size: int = 7
    latent_dim: int = 256
    image_size: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 128)
    projection_dim: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_channels < 2:
            raise ConfigurationError(f"num_channels must be >= 2, got {self.num_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.latent_dim < 1 or self.projection_dim < 1:
            raise ConfigurationError("latent_dim and projection_dim must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigurationError(f"invalid backbone widths {self.widths}")
        if self.image_size < 1 or self.image_size % self.downsampling != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by backbone downsampling {self.downsampling}"
            )

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.widths) - 1)


# --------------------------------------------------------------------------
# sparsemax


def _sparsemax_threshold(z: torch.Tensor, dim: int):
    zs, _ = torch.sort(z, dim=dim, descending=True, stable=True)
    k = z.shape[dim]
    shape = [1] * z.dim()
    shape[dim] = k
    rho = torch.arange(1, k + 1, dtype=z.dtype, device=z.device).view(shape)
    cssv = zs.cumsum(dim)
    support = (1 + rho * zs > cssv).to(z.dtype)
    size = support.sum(dim=dim, keepdim=True)
    # cumulative sum at the last supported index
    tau = (cssv.gather(dim, size.long() - 1) - 1) / size
    return tau, size


class SparsemaxFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, dim):
        z_shift = z - z.amax(dim=dim, keepdim=True)
        tau, size = _sparsemax_threshold(z_shift, dim)
        out = torch.clamp(z_shift - tau, min=0)
        ctx.dim = dim
        ctx.save_for_backward(out, size)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, size = ctx.saved_tensors
        dim = ctx.dim
        supp = (out > 0).to(grad.dtype)
        g = grad * supp
        mean = g.sum(dim=dim, keepdim=True) / size
        return supp * (grad - mean), None


def sparsemax(z: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Differentiable sparsemax along ``dim``; see :func:`ustex.kernels.sparsemax` for numpy."""
    if z.shape[dim] < 2:
        raise InvalidInputError("sparsemax needs at least 2 channels")
    if not torch.isfinite(z).all():
        raise InvalidInputError("sparsemax input contains non-finite values")
    return SparsemaxFunction.apply(z, dim)


# --------------------------------------------------------------------------
# backbone


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.SiLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.SiLU(),
        )


class UNetBackbone(nn.Module):
    """Compact U-Net returning ``(logits, bottleneck)``.

    GroupNorm keeps outputs independent of batch composition, so the same
    image encodes identically alone or inside a batch.
    """

    def __init__(self, out_channels: int, widths=(16, 32, 64, 128), in_channels: int = 1):
        super().__init__()
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(ConvBlock(c, w))
            c = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        rev = list(widths[::-1])
        for hi, lo in zip(rev[:-1], rev[1:]):
            self.up.append(nn.ConvTranspose2d(hi, lo, 2, stride=2))
            self.dec.append(ConvBlock(2 * lo, lo))
        self.head = nn.Conv2d(widths[0], out_channels, 1)
        self.bottleneck_channels = widths[-1]

    def encode(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        return skips

    def decode(self, skips):
        x = skips[-1]
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x):
        skips = self.encode(x)
        return self.decode(skips), skips[-1]


# --------------------------------------------------------------------------
# heads


class TextureKernelBank(nn.Module):
    """Per-channel (depthwise) kernels followed by a 1x1 squash and tanh."""

    def __init__(self, num_channels: int, kernel_size: int = 7):
        super().__init__()
        k = num_channels
        self.kernels = nn.Parameter(torch.zeros(k, 1, kernel_size, kernel_size))
        self.squash_weights = nn.Parameter(torch.zeros(1, k, 1, 1))
        self.squash_bias = nn.Parameter(torch.zeros(1))
        self.reset_parameters()

    def reset_parameters(self):
        k, _, s, _ = self.kernels.shape
        with torch.no_grad():
            # near-delta kernels with spread squash gains start every channel
            # at a distinct intensity level
            self.kernels.normal_(0.0, 0.02)
            self.kernels[:, 0, s // 2, s // 2] += 1.0
            self.squash_weights.copy_(torch.linspace(-1.5, 1.5, k).view(1, k, 1, 1))
            self.squash_bias.zero_()

    @property
    def num_channels(self) -> int:
        return self.kernels.shape[0]

    def pre_activation(self, weights: torch.Tensor) -> torch.Tensor:
        if weights.shape[1] != self.num_channels:
            raise ConfigurationError(
                f"segmentation has {weights.shape[1]} channels, kernel bank has {self.num_channels}"
            )
        pad = self.kernels.shape[-1] // 2
        filtered = F.conv2d(weights, self.kernels, padding=pad, groups=self.num_channels)
        return (filtered * self.squash_weights).sum(dim=1, keepdim=True) + self.squash_bias

    def forward(self, weights: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.pre_activation(weights))


class ProjectionHead(nn.Sequential):
    def __init__(self, dim: int, out_dim: int):
        super().__init__(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, out_dim))

    def forward(self, x):
        return F.normalize(super().forward(x), dim=-1)


class Segmentation(NamedTuple):
    logits: torch.Tensor
    weights: torch.Tensor


class Latent(NamedTuple):
    values: torch.Tensor
    projection: torch.Tensor


class ModelOutput(NamedTuple):
    logits: torch.Tensor
    weights: torch.Tensor
    reconstruction: torch.Tensor
    latent: torch.Tensor
    projection: torch.Tensor


class TextureAutoencoder(nn.Module):
    def __init__(self, config: TextureConfig | None = None):
        super().__init__()
        self.config = config or TextureConfig()
        cfg = self.config
        self.backbone = UNetBackbone(cfg.num_channels, cfg.widths)
        self.to_latent = nn.Conv2d(self.backbone.bottleneck_channels, cfg.latent_dim, 1)
        self.projection = ProjectionHead(cfg.latent_dim, cfg.projection_dim)
        self.bank = TextureKernelBank(cfg.num_channels, cfg.kernel_size)

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        if x.dim() != 4 or x.shape[1] != 1:
            raise InvalidInputError(f"expected (N, 1, H, W) images, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        d = self.config.downsampling
        if h % d or w % d:
            raise ConfigurationError(f"image size {h}x{w} incompatible with backbone downsampling {d}")
        return x

    def _latent(self, bottleneck):
        values = self.to_latent(bottleneck).mean(dim=(2, 3))
        return values, self.projection(values)

    def segment(self, x: torch.Tensor) -> Segmentation:
        logits, _ = self.backbone(self._check(x))
        return Segmentation(logits, sparsemax(logits, dim=1))

    def reconstruct(self, weights: torch.Tensor) -> torch.Tensor:
        return self.bank(weights)

    def encode(self, x: torch.Tensor) -> Latent:
        skips = self.backbone.encode(self._check(x))
        return Latent(*self._latent(skips[-1]))

    def forward(self, x: torch.Tensor) -> ModelOutput:
        x = self._check(x)
        skips = self.backbone.encode(x)
        logits = self.backbone.decode(skips)
        weights = sparsemax(logits, dim=1)
        values, proj = self._latent(skips[-1])
        return ModelOutput(logits, weights, self.bank(weights), values, proj)
