"""AdamW training loop with cosine annealing, checkpoints and texture-map snapshots."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, ViewSet, make_view_set
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, ImageCache, balanced_sampler
from .errors import ConfigurationError, InvalidInputError, NonFiniteLossError
from .losses import COMPONENTS, LossBreakdown, LossWeights, SSIMConfig, total_loss
from .model import TextureAutoencoder, TextureConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr") + COMPONENTS + ("total",)


@dataclass
class TrainConfig:
    epochs: int = 1000
    epoch_size: int = 10000
    batch_size: int = 32
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    snapshot_every: int = 10
    mixed_precision: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 (NT-Xent needs negatives), got {self.batch_size}")
        if self.epoch_size < self.batch_size:
            raise ConfigurationError("epoch_size must be >= batch_size")
        if not 0 <= self.lr_min < self.lr_max:
            raise ConfigurationError(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.snapshot_every < 1:
            raise ConfigurationError("snapshot_every must be >= 1")

    @property
    def steps_per_epoch(self) -> int:
        return self.epoch_size // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps < 1:
        raise InvalidInputError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    # endpoints returned verbatim so they are exact
    if step == 0:
        return cfg.lr_max
    if step == total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def subseed(seed: int, name: str, *extra: int) -> int:
    """Independent, reproducible seed for one named subsystem."""
    key = [int(seed), *name.encode()] + [int(e) for e in extra]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr_max, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def stack_view_sets(view_sets: Sequence[ViewSet], dtype=torch.float32):
    """Views as ``(4B, 1, H, W)`` in (b, s, c) order and targets as ``(B, 2, 1, H, W)``."""
    views = np.stack([vs.views.reshape(4, *vs.views.shape[2:]) for vs in view_sets])
    targets = np.stack([vs.targets for vs in view_sets])
    b, _, h, w = views.shape
    v = torch.from_numpy(views.reshape(4 * b, 1, h, w)).to(dtype)
    t = torch.from_numpy(targets[:, :, None]).to(dtype)
    return v, t


def train_step(
    model: TextureAutoencoder,
    views: torch.Tensor,
    targets: torch.Tensor,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    ssim_cfg: SSIMConfig | None = None,
    perceptual=None,
    mixed_precision: bool = False,
) -> LossBreakdown:
    """One forward over all views, one AdamW update; returns the pre-update losses."""
    if targets.shape[0] < 2:
        raise InvalidInputError("a training batch needs at least 2 view sets")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    with torch.autocast("cpu", dtype=torch.bfloat16, enabled=mixed_precision):
        out = model(views)
    if mixed_precision:
        out = type(out)(*(t.float() for t in out))
    losses = total_loss(out, targets.to(out.reconstruction.dtype), weights, ssim_cfg, perceptual)
    bad = losses.first_non_finite()
    if bad is not None:
        raise NonFiniteLossError(bad, float(getattr(losses, bad).detach()))
    losses.total.backward()
    optimizer.step()
    return LossBreakdown(**{k: v.detach() for k, v in vars(losses).items()})


def epoch_batches(
    manifest: DatasetManifest,
    images: ImageCache,
    cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    epoch: int,
) -> Iterator[tuple[list, list[ViewSet]]]:
    """Deterministic batches for ``epoch``: depends only on (seed, epoch)."""
    sampler_rng = np.random.default_rng(subseed(cfg.seed, "sampler", epoch))
    aug_rng = np.random.default_rng(subseed(cfg.seed, "augment", epoch))
    for records in balanced_sampler(manifest, cfg.epoch_size, cfg.batch_size, sampler_rng, drop_last=True):
        yield records, [make_view_set(images[r], aug_rng, aug_cfg) for r in records]


# --------------------------------------------------------------------------
# texture maps

DEFAULT_PALETTE = np.array([
    [1.00, 0.85, 0.10],  # yellow
    [0.20, 0.75, 0.25],  # green
    [0.10, 0.80, 0.85],  # cyan
    [0.15, 0.30, 0.90],  # blue
    [0.55, 0.20, 0.70],  # purple
    [0.90, 0.35, 0.20],
    [0.60, 0.60, 0.60],
    [0.95, 0.55, 0.75],
])


def default_palette(k: int) -> np.ndarray:
    if k <= len(DEFAULT_PALETTE):
        return DEFAULT_PALETTE[:k].copy()
    import matplotlib

    cmap = matplotlib.colormaps["hsv"]
    return np.array([cmap(i / k)[:3] for i in range(k)])


def channel_order(weights: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Channels sorted by descending mean intensity of the pixels each one dominates.

    ``weights`` is ``(K, H, W)`` or ``(N, K, H, W)`` with matching images.
    Channels that dominate no pixel go last, in index order.
    """
    w = np.asarray(weights)
    img = np.asarray(image)
    if w.ndim == 3:
        w, img = w[None], img[None]
    k = w.shape[1]
    dominant = w.argmax(axis=1)
    means = np.full(k, -np.inf)
    for c in range(k):
        m = dominant == c
        if m.any():
            means[c] = img.reshape(dominant.shape)[m].mean()
    return np.array(sorted(range(k), key=lambda c: (-means[c], c)))


def render_texture_map(weights: np.ndarray, palette: np.ndarray | None = None, order=None):
    """Convex colour blend of the channels plus the per-channel panels.

    Returns ``(rgb, panels)``: ``rgb`` is ``(H, W, 3)``, ``panels`` is
    ``(K, H, W)`` listed in ``order`` (default: channel index order).
    """
    w = np.asarray(weights, dtype=np.float64)
    k = w.shape[0]
    palette = default_palette(k) if palette is None else np.asarray(palette, dtype=np.float64)
    if palette.shape != (k, 3):
        raise ConfigurationError(f"palette has {palette.shape[0]} colours for {k} channels")
    rgb = np.einsum("khw,kc->hwc", w, palette)
    order = np.arange(k) if order is None else np.asarray(order)
    return rgb, w[order]


def save_snapshot(path, image: np.ndarray, weights: np.ndarray, palette=None) -> None:
    """Fig.-2-style strip: B-mode, texture map, then channels from most to least echoic."""
    from PIL import Image

    order = channel_order(weights, image)
    palette = default_palette(weights.shape[0]) if palette is None else np.asarray(palette)
    rgb, panels = render_texture_map(weights, palette, order)
    gray = (np.clip(image, -1, 1) + 1) / 2
    tiles = [np.repeat(gray[..., None], 3, axis=2), rgb]
    tiles += [panels[i][..., None] * palette[order[i]] for i in range(len(order))]
    strip = np.concatenate(tiles, axis=1)
    Image.fromarray(np.clip(np.rint(strip * 255), 0, 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    model: TextureAutoencoder
    log: list[dict]
    out_dir: Path
    checkpoints: list[Path] = field(default_factory=list)


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()})
        return rows


def fit(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    weights: LossWeights,
    out_dir,
    texture_cfg: TextureConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
    resume=None,
    ssim_cfg: SSIMConfig | None = None,
    perceptual=None,
    images: ImageCache | None = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> FitResult:
    """Train from scratch (or from the checkpoint directory ``resume``).

    Writes ``train_log.csv`` (one row per step), ``draws.csv`` (per-epoch
    organ-group draw counts), ``checkpoints/epoch_<n>/`` every
    ``snapshot_every`` epochs plus ``checkpoints/final/``, and
    ``snapshots/epoch_<n>_<organ>.png``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aug_cfg = aug_cfg or AugmentConfig()
    factory = lambda params: make_optimizer(params, cfg)  # noqa: E731

    if resume is not None:
        model, optimizer, state = load_checkpoint(resume, factory)
        start_epoch = int(state["epoch"]) + 1
        step = int(state["step"])
        log_path = out_dir / "train_log.csv"
        rows = [r for r in read_log(log_path) if r["step"] < step] if log_path.exists() else []
        draw_rows = _read_draws(out_dir / "draws.csv", start_epoch)
    else:
        texture_cfg = texture_cfg or TextureConfig()
        torch.manual_seed(subseed(cfg.seed, "model"))
        model = TextureAutoencoder(texture_cfg)
        optimizer = factory(model.parameters())
        start_epoch, step, rows, draw_rows = 1, 0, [], []
    texture_cfg = model.config
    images = images or ImageCache(manifest, texture_cfg.image_size)
    dtype = next(model.parameters()).dtype
    total = cfg.total_steps
    checkpoints = []
    groups = list(manifest.groups())
    snapshot_records = [manifest.groups()[g][0] for g in groups]
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    (out_dir / "snapshots").mkdir(exist_ok=True)
    log.info("training %d epochs x %d steps (seed %d)", cfg.epochs, cfg.steps_per_epoch, cfg.seed)

    for epoch in range(start_epoch, cfg.epochs + 1):
        counts = dict.fromkeys(groups, 0)
        for records, view_sets in epoch_batches(manifest, images, cfg, aug_cfg, epoch):
            for r in records:
                counts[r.organ_group] += 1
            lr = lr_schedule(step, total, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            views, targets = stack_view_sets(view_sets, dtype)
            losses = train_step(model, views, targets, weights, optimizer, ssim_cfg, perceptual, cfg.mixed_precision)
            row = {"step": step, "epoch": epoch, "lr": lr, **losses.as_dict()}
            rows.append(row)
            if on_step is not None:
                on_step(step, row)
            step += 1
        draw_rows.extend({"epoch": epoch, "organ_group": g, "count": c} for g, c in counts.items())
        _write_log(out_dir / "train_log.csv", rows)
        _write_draws(out_dir / "draws.csv", draw_rows)
        if epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs:
            state = {"epoch": epoch, "step": step, "seed": cfg.seed}
            ckpt = save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}", model, optimizer, state)
            checkpoints.append(ckpt)
            _snapshots(model, images, snapshot_records, out_dir / "snapshots", epoch)
    final = save_checkpoint(out_dir / "checkpoints" / "final", model, optimizer,
                            {"epoch": cfg.epochs, "step": step, "seed": cfg.seed})
    checkpoints.append(final)
    return FitResult(model, rows, out_dir, checkpoints)


def _snapshots(model, images, records, directory: Path, epoch: int) -> None:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for r in records:
            img = images[r]
            seg = model.segment(torch.from_numpy(img).to(dtype))
            name = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in r.organ_group)
            save_snapshot(directory / f"epoch_{epoch}_{name}.png", img, seg.weights[0].numpy())


def _write_draws(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("epoch", "organ_group", "count"))
        w.writeheader()
        w.writerows(rows)


def _read_draws(path: Path, before_epoch: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "organ_group": r["organ_group"], "count": int(r["count"])}
            for r in csv.DictReader(fh)
            if int(r["epoch"]) < before_epoch
        ]
