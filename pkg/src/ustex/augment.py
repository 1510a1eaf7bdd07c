"""Four-view augmentation: two spatial draws, each with two colour draws.

All functions work on 2-D float64 numpy arrays in [-1, 1]. Randomness comes
only from the ``numpy.random.Generator`` passed in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvalidParameterError


@dataclass
class AugmentConfig:
    crop_area: tuple[float, float] = (0.6, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    max_rotation: float = 10.0
    rotation_fill: float = 0.0
    erase_prob: float = 0.3
    erase_area: tuple[float, float] = (0.02, 0.1)
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    max_blur_sigma: float = 1.5

    def __post_init__(self):
        self.crop_area = tuple(self.crop_area)
        self.crop_aspect = tuple(self.crop_aspect)
        self.erase_area = tuple(self.erase_area)
        self.contrast = tuple(self.contrast)
        lo, hi = self.crop_area
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"crop_area must satisfy 0 < lo <= hi <= 1, got {self.crop_area}")
        if not 0 < self.crop_aspect[0] <= self.crop_aspect[1]:
            raise ConfigurationError(f"invalid crop_aspect {self.crop_aspect}")
        for name in ("flip_prob", "erase_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must be a probability")
        if not 0 < self.erase_area[0] <= self.erase_area[1] < 1:
            raise ConfigurationError(f"invalid erase_area {self.erase_area}")
        if self.max_rotation < 0 or self.brightness < 0 or self.max_blur_sigma < 0:
            raise ConfigurationError("rotation, brightness and blur ranges must be >= 0")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ConfigurationError(f"invalid contrast range {self.contrast}")


@dataclass(frozen=True)
class SpatialParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    angle: float = 0.0

    @classmethod
    def identity(cls, size: int) -> "SpatialParams":
        return cls(0, 0, size, size)


@dataclass(frozen=True)
class ColorParams:
    erase: Optional[tuple[int, int, int, int]] = None  # (top, left, height, width)
    brightness: float = 0.0
    contrast: float = 1.0
    sigma: float = 0.0


@dataclass
class ViewSet:
    """Views indexed ``views[s, c]``; ``targets[s]`` is the spatial-only image."""

    views: np.ndarray  # (2, 2, H, W)
    targets: np.ndarray  # (2, H, W)
    spatial_params: tuple[SpatialParams, SpatialParams]
    color_params: tuple[tuple[ColorParams, ColorParams], tuple[ColorParams, ColorParams]]


def spatial_augment(image: np.ndarray, params: SpatialParams, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Crop, resize back to full size, optionally mirror, then rotate."""
    cfg = cfg or AugmentConfig()
    h, w = image.shape
    if abs(params.angle) > cfg.max_rotation:
        raise InvalidParameterError(f"rotation {params.angle} exceeds {cfg.max_rotation} degrees")
    out = kernels.crop_resize(image, params.top, params.left, params.height, params.width, h, w)
    if params.flip:
        out = out[:, ::-1]
    out = kernels.rotate(out, params.angle, cfg.rotation_fill)
    return np.clip(out, -1.0, 1.0)


def color_augment(image: np.ndarray, params: ColorParams) -> np.ndarray:
    """Erase -> brightness -> contrast -> blur, then clamp to [-1, 1]."""
    out = np.array(image, dtype=np.float64, copy=True)
    if params.erase is not None:
        top, left, eh, ew = params.erase
        H, W = out.shape
        if eh <= 0 or ew <= 0 or top < 0 or left < 0 or top + eh > H or left + ew > W:
            raise InvalidParameterError(f"erase box {params.erase} outside {H}x{W} image")
        out[top:top + eh, left:left + ew] = -1.0
    if params.brightness:
        out += params.brightness
    if params.contrast != 1.0:
        m = out.mean()
        out = (out - m) * params.contrast + m
    if params.sigma > 0:
        out = kernels.blur(out, params.sigma)
    return np.clip(out, -1.0, 1.0)


def sample_spatial(rng: np.random.Generator, size: int, cfg: AugmentConfig) -> SpatialParams:
    area = rng.uniform(*cfg.crop_area)
    aspect = rng.uniform(*cfg.crop_aspect)
    h = int(np.clip(round(size * np.sqrt(area * aspect)), 1, size))
    w = int(np.clip(round(size * np.sqrt(area / aspect)), 1, size))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    return SpatialParams(top, left, h, w, flip, angle)


def sample_color(rng: np.random.Generator, size: int, cfg: AugmentConfig) -> ColorParams:
    erase = None
    if rng.random() < cfg.erase_prob:
        frac = rng.uniform(*cfg.erase_area)
        side = int(np.clip(round(size * np.sqrt(frac)), 1, size))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        erase = (top, left, side, side)
    return ColorParams(
        erase=erase,
        brightness=float(rng.uniform(-cfg.brightness, cfg.brightness)),
        contrast=float(rng.uniform(*cfg.contrast)),
        sigma=float(rng.uniform(0.0, cfg.max_blur_sigma)),
    )


def make_view_set(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> ViewSet:
    cfg = cfg or AugmentConfig()
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[0]
    spatial = tuple(sample_spatial(rng, size, cfg) for _ in range(2))
    color = tuple(tuple(sample_color(rng, size, cfg) for _ in range(2)) for _ in range(2))
    targets = np.stack([spatial_augment(image, p, cfg) for p in spatial])
    views = np.stack([
        np.stack([color_augment(targets[s], color[s][c]) for c in range(2)])
        for s in range(2)
    ])
    return ViewSet(views, targets, spatial, color)
