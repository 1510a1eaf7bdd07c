"""Training objectives.

Batched view tensors follow one layout throughout: for B images the 4B views
are ordered image-major, ``index = 4 * b + 2 * s + c`` with ``s`` the spatial
and ``c`` the colour augmentation index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError

PerceptualFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    w_contrastive: float = 1.0
    w_consistency: float = 1.0
    w_l1: float = 1.0
    w_ssim: float = 1.0
    w_perceptual: float = 0.0
    w_entropy: float = 0.01
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        for f in fields(self):
            if f.name.startswith("w_") and getattr(self, f.name) < 0:
                raise ConfigurationError(f"{f.name} must be >= 0")


@dataclass
class SSIMConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 2.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigurationError(f"SSIM window_size must be odd, got {self.window_size}")
        if not self.window_sigma > 0:
            raise ConfigurationError("SSIM window_sigma must be > 0")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


COMPONENTS = ("contrastive", "consistency", "l1", "ssim_term", "perceptual", "entropy_term")
_WEIGHT_OF = {
    "contrastive": "w_contrastive",
    "consistency": "w_consistency",
    "l1": "w_l1",
    "ssim_term": "w_ssim",
    "perceptual": "w_perceptual",
    "entropy_term": "w_entropy",
}


@dataclass
class LossBreakdown:
    contrastive: torch.Tensor
    consistency: torch.Tensor
    l1: torch.Tensor
    ssim_term: torch.Tensor
    perceptual: torch.Tensor
    entropy_term: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in COMPONENTS + ("total",)}

    def first_non_finite(self) -> Optional[str]:
        for name in COMPONENTS + ("total",):
            if not math.isfinite(float(getattr(self, name).detach())):
                return name
        return None


def nt_xent(z: torch.Tensor, temperature: float, views_per_image: int = 4) -> torch.Tensor:
    """Multi-positive NT-Xent over grouped unit embeddings.

    ``z`` is ``(B, V, P)`` or ``(B * V, P)`` with the V views of each image
    adjacent. Every ordered pair of sibling views is a positive; the
    denominator runs over all other embeddings in the batch. Returns the mean
    over the ``B * V * (V - 1)`` positive pairs.
    """
    if z.dim() == 3:
        views_per_image = z.shape[1]
        z = z.reshape(-1, z.shape[-1])
    n = z.shape[0]
    if n < 2:
        raise InvalidInputError("NT-Xent needs at least 2 embeddings")
    if n % views_per_image:
        raise InvalidInputError(f"{n} embeddings do not split into groups of {views_per_image}")
    norms = z.detach().norm(dim=-1)
    if (norms - 1).abs().max() > 1e-4:
        raise InvalidInputError("NT-Xent embeddings must be unit-norm")
    sim = z @ z.T / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    group = torch.arange(n, device=z.device) // views_per_image
    positive = (group[:, None] == group[None, :]) & ~eye
    return (log_den - sim)[positive].mean()


def consistency_mse(logits: torch.Tensor) -> torch.Tensor:
    """Half the sum of colour-pair MSEs, averaged over the batch.

    ``logits`` is ``(B, 4, K, H, W)`` (or ``(4, K, H, W)`` for one image) in
    (s, c) order.
    """
    if logits.dim() == 4:
        logits = logits[None]
    if logits.dim() != 5 or logits.shape[1] != 4:
        raise InvalidInputError(f"expected (B, 4, K, H, W) logits, got {tuple(logits.shape)}")
    a = F.mse_loss(logits[:, 0], logits[:, 1])
    b = F.mse_loss(logits[:, 2], logits[:, 3])
    return 0.5 * (a + b)


def _gaussian_window(cfg: SSIMConfig, dtype, device) -> torch.Tensor:
    r = cfg.window_size // 2
    t = torch.arange(-r, r + 1, dtype=dtype, device=device)
    g = torch.exp(-0.5 * (t / cfg.window_sigma) ** 2)
    g = g / g.sum()
    return g


def ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: SSIMConfig | None = None) -> torch.Tensor:
    """Local SSIM index over valid window positions; inputs ``(N, 1, H, W)``."""
    cfg = cfg or SSIMConfig()
    if x.shape != y.shape:
        raise InvalidInputError(f"SSIM shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    while x.dim() < 4:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < cfg.window_size:
        raise InvalidInputError(f"image {tuple(x.shape[-2:])} smaller than SSIM window {cfg.window_size}")
    c = x.shape[1]
    g = _gaussian_window(cfg, x.dtype, x.device)
    wy = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    wx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)

    def filt(t):
        return F.conv2d(F.conv2d(t, wy, groups=c), wx, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * sxy + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (sxx + syy + cfg.c2)
    return num / den


def ssim(x: torch.Tensor, y: torch.Tensor, cfg: SSIMConfig | None = None) -> torch.Tensor:
    """Mean SSIM with data range 2 (images in [-1, 1])."""
    return ssim_map(x, y, cfg).mean()


def reconstruction_loss(
    recon: torch.Tensor,
    target: torch.Tensor,
    cfg: SSIMConfig | None = None,
    perceptual: PerceptualFn | None = None,
):
    """Return ``(l1, 1 - ssim, perceptual)``; the perceptual term is 0 without a plug-in."""
    if recon.shape != target.shape:
        raise InvalidInputError(f"reconstruction shape {tuple(recon.shape)} != target {tuple(target.shape)}")
    l1 = (recon - target).abs().mean()
    ssim_term = 1 - ssim(recon, target, cfg)
    if perceptual is None:
        p = torch.zeros((), dtype=recon.dtype, device=recon.device)
    else:
        p = perceptual(recon, target)
    return l1, ssim_term, p


def entropy_regularizer(weights: torch.Tensor, tol: float = 1e-4) -> torch.Tensor:
    """Negative entropy of batch-aggregate channel usage; lies in [-ln K, 0]."""
    if weights.dim() == 3:
        weights = weights[None]
    sums = weights.detach().sum(dim=1)
    if weights.detach().min() < -tol or (sums - 1).abs().max() > tol:
        raise InvalidInputError("channel weights violate the per-pixel simplex constraint")
    p = weights.mean(dim=(0, 2, 3))
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(torch.finfo(p.dtype).tiny)), torch.zeros_like(p))
    return plogp.sum()


def total_loss(
    output,
    targets: torch.Tensor,
    weights: LossWeights,
    ssim_cfg: SSIMConfig | None = None,
    perceptual: PerceptualFn | None = None,
) -> LossBreakdown:
    """Combine every objective for one batch of view sets.

    ``output`` is the :class:`~ustex.model.ModelOutput` of the 4B views in
    (b, s, c) order; ``targets`` holds the spatial-only images as
    ``(B, 2, 1, H, W)`` (or ``(B, 2, H, W)``).
    """
    if weights.w_perceptual > 0 and perceptual is None:
        raise ConfigurationError("w_perceptual > 0 requires a perceptual plug-in")
    n = output.reconstruction.shape[0]
    if n % 4:
        raise InvalidInputError(f"{n} views is not a multiple of 4")
    b = n // 4
    if targets.dim() == 4:
        targets = targets[:, :, None]
    if targets.shape[:2] != (b, 2):
        raise InvalidInputError(f"targets shape {tuple(targets.shape)} does not match {b} view sets")
    # each view is compared with the spatial-only image it came from
    per_view_target = targets.repeat_interleave(2, dim=1).reshape(output.reconstruction.shape)

    contrastive = nt_xent(output.projection.reshape(b, 4, -1), weights.temperature)
    k, h, w = output.logits.shape[1:]
    consistency = consistency_mse(output.logits.reshape(b, 4, k, h, w))
    l1, ssim_term, perc = reconstruction_loss(output.reconstruction, per_view_target, ssim_cfg, perceptual)
    entropy_term = entropy_regularizer(output.weights)

    parts = dict(
        contrastive=contrastive,
        consistency=consistency,
        l1=l1,
        ssim_term=ssim_term,
        perceptual=perc,
        entropy_term=entropy_term,
    )
    total = sum(getattr(weights, _WEIGHT_OF[name]) * val for name, val in parts.items())
    return LossBreakdown(total=total, **parts)
