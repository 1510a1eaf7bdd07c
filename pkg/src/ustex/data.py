"""Manifests, preprocessing, organ-balanced sampling and speckle phantoms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .errors import (
    ConfigurationError,
    DuplicatePathError,
    InvalidInputError,
    InvalidParameterError,
    MalformedRowError,
    ManifestNotFoundError,
)

LUMA = (0.299, 0.587, 0.114)
REQUIRED_COLUMNS = ("image_path", "organ_group", "patient_id", "frame_index")
LABEL_PREFIX = "label_"


# --------------------------------------------------------------------------
# preprocessing


def _dtype_range(a: np.ndarray):
    if a.dtype == np.bool_:
        return 0.0, 1.0
    if np.issubdtype(a.dtype, np.integer):
        info = np.iinfo(a.dtype)
        return float(info.min), float(info.max)
    return None


def preprocess(raw, image_size: int = 128, source_range: Optional[tuple[float, float]] = None) -> np.ndarray:
    """Grayscale, bilinear resize to ``image_size`` square, affine map onto [-1, 1].

    Integer images use their dtype's full range (8-bit: ``v / 127.5 - 1``).
    Float images are assumed canonical (range [-1, 1]) unless
    ``source_range`` says otherwise.
    """
    a = np.asarray(raw)
    if a.size == 0:
        raise InvalidInputError("empty image")
    rng = source_range or _dtype_range(a)
    if a.ndim == 3:
        if a.shape[2] == 1:
            a = a[..., 0]
        elif a.shape[2] in (3, 4):
            a = a[..., :3].astype(np.float64) @ np.array(LUMA)
        else:
            raise InvalidInputError(f"unsupported channel count {a.shape[2]}")
    elif a.ndim != 2:
        raise InvalidInputError(f"expected a 2-D or HxWxC image, got shape {a.shape}")
    a = a.astype(np.float64)
    if rng is None:
        if a.min() < -1 - 1e-9 or a.max() > 1 + 1e-9:
            raise InvalidInputError("float image outside [-1, 1]; pass source_range")
        lo, hi = -1.0, 1.0
    else:
        lo, hi = map(float, rng)
        if not hi > lo:
            raise InvalidInputError(f"degenerate source range {rng}")
    if a.shape != (image_size, image_size):
        a = kernels.crop_resize(a, 0, 0, a.shape[0], a.shape[1], image_size, image_size)
    if (lo, hi) != (-1.0, 1.0):
        a = (a - lo) * (2.0 / (hi - lo)) - 1.0
    return np.clip(a, -1.0, 1.0)


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit single- or three-channel raster as a numpy array."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.array(im, dtype=np.uint16)
        if im.mode == "I":
            a = np.array(im)
            return a.astype(np.uint16) if a.min() >= 0 and a.max() <= 65535 else a.astype(np.float64)
        if im.mode in ("L", "RGB"):
            return np.array(im)
        return np.array(im.convert("RGB"))


def write_image(path, image: np.ndarray) -> None:
    """Write a [-1, 1] image as 8-bit grayscale."""
    a = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


def load_image(path, image_size: int = 128) -> np.ndarray:
    return preprocess(read_image(path), image_size)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    organ_group: str
    patient_id: str
    frame_index: int
    labels: dict = field(default_factory=dict, hash=False, compare=True)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def groups(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.organ_group, []).append(r)
        return dict(sorted(out.items()))

    def label_names(self) -> list[str]:
        names: list[str] = []
        for r in self.records:
            for k in r.labels:
                if k not in names:
                    names.append(k)
        return names


def _parse_label(text: str):
    t = text.strip()
    if t == "":
        return None
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    return float(t)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    records = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRowError(1, "empty manifest") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise MalformedRowError(1, f"header lacks columns {missing}")
        label_cols = [h for h in header if h.startswith(LABEL_PREFIX)]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRowError(lineno, f"expected {len(header)} fields, got {len(row)}")
            cells = dict(zip(header, (c.strip() for c in row)))
            for col in REQUIRED_COLUMNS:
                if not cells[col]:
                    raise MalformedRowError(lineno, f"missing {col}")
            try:
                frame = int(cells["frame_index"])
            except ValueError:
                raise MalformedRowError(lineno, f"frame_index {cells['frame_index']!r} is not an integer") from None
            if frame < 0:
                raise MalformedRowError(lineno, "frame_index must be >= 0")
            try:
                labels = {c[len(LABEL_PREFIX):]: _parse_label(cells[c]) for c in label_cols}
            except ValueError as exc:
                raise MalformedRowError(lineno, f"bad label value: {exc}") from None
            img = cells["image_path"]
            if img in seen:
                raise DuplicatePathError(f"{img} listed on lines {seen[img]} and {lineno}")
            seen[img] = lineno
            labels = {k: v for k, v in labels.items() if v is not None}
            records.append(ManifestRecord(img, cells["organ_group"], cells["patient_id"], frame, labels))
    return DatasetManifest(records, path.parent)


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    label_names: list[str] = []
    for r in records:
        for k in r.labels:
            if k not in label_names:
                label_names.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(REQUIRED_COLUMNS) + [LABEL_PREFIX + k for k in label_names])
        for r in records:
            labels = ["" if r.labels.get(k) is None else _fmt_label(r.labels[k]) for k in label_names]
            w.writerow([r.image_path, r.organ_group, r.patient_id, r.frame_index] + labels)


def _fmt_label(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return repr(float(v))


class ImageCache:
    """Loads and preprocesses manifest images once."""

    def __init__(self, manifest: DatasetManifest, image_size: int):
        self.manifest = manifest
        self.image_size = image_size
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, record: ManifestRecord) -> np.ndarray:
        img = self._cache.get(record.image_path)
        if img is None:
            img = load_image(self.manifest.resolve(record), self.image_size)
            self._cache[record.image_path] = img
        return img


# --------------------------------------------------------------------------
# sampling


def balanced_sampler(
    manifest: DatasetManifest,
    epoch_size: int,
    batch_size: int,
    rng: np.random.Generator,
    drop_last: bool = False,
) -> Iterator[list[ManifestRecord]]:
    """Yield one epoch of record batches drawn group-first, with replacement.

    Each draw picks an organ group uniformly, then a record uniformly within
    it, so small groups are seen as often as large ones.
    """
    groups = manifest.groups()
    if not groups:
        raise ConfigurationError("manifest has no records")
    for name, members in groups.items():
        if not members:
            raise ConfigurationError(f"organ group {name!r} is empty")
    if epoch_size < batch_size:
        raise ConfigurationError(f"epoch_size {epoch_size} smaller than batch_size {batch_size}")
    members = list(groups.values())
    g = rng.integers(0, len(members), size=epoch_size)
    u = rng.random(epoch_size)
    draws = [members[gi][min(int(ui * len(members[gi])), len(members[gi]) - 1)] for gi, ui in zip(g, u)]
    stop = epoch_size - epoch_size % batch_size if drop_last else epoch_size
    for start in range(0, stop, batch_size):
        yield draws[start:start + batch_size]


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Region:
    """One phantom region.

    ``geometry`` is unused for ``background``; ``(cy, cx, radius)`` for
    ``disc``; ``(offset, half_width, angle_deg)`` for ``band`` (a strip whose
    centre line passes ``offset`` pixels from the canvas centre).
    """

    shape: str
    texture_class: int
    echogenicity: float
    scatterer_density: float = 1.0
    geometry: tuple = ()


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int
    regions: tuple[Region, ...]
    seed: int = 0
    dynamic_range_db: float = 40.0
    headroom_db: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.regions:
            raise InvalidParameterError("phantom needs at least one region")
        classes = sorted({r.texture_class for r in self.regions})
        if classes != list(range(len(classes))):
            raise InvalidParameterError(f"texture classes must be contiguous from 0, got {classes}")
        for r in self.regions:
            if r.shape not in ("background", "disc", "band"):
                raise InvalidParameterError(f"unknown region shape {r.shape!r}")
            if r.echogenicity < 0 or r.scatterer_density <= 0:
                raise InvalidParameterError("echogenicity must be >= 0 and scatterer_density > 0")


def region_mask(region: Region, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if region.shape == "background":
        return np.ones((size, size), dtype=bool)
    if region.shape == "disc":
        cy, cx, r = region.geometry
        if not (0 <= cy < size and 0 <= cx < size) or r <= 0:
            raise InvalidParameterError(f"disc {region.geometry} outside {size}x{size} canvas")
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    offset, half_width, angle = region.geometry
    c = (size - 1) / 2.0
    a = math.radians(angle)
    dist = (yy - c) * math.cos(a) - (xx - c) * math.sin(a) - offset
    mask = np.abs(dist) <= half_width
    if half_width <= 0 or not mask.any():
        raise InvalidParameterError(f"band {region.geometry} outside {size}x{size} canvas")
    return mask


def correlation_sigma(density: float) -> float:
    """Speckle grain size in pixels: sparser scatterers give coarser grain."""
    return float(np.clip(1.0 / math.sqrt(density), 0.5, 4.0))


def _speckle_amplitude(rng: np.random.Generator, size: int, density: float) -> np.ndarray:
    sigma = correlation_sigma(density)
    taps = kernels.gaussian_taps(sigma)
    re = kernels.blur(rng.standard_normal((size, size)), sigma)
    im = kernels.blur(rng.standard_normal((size, size)), sigma)
    # unit mean-square Rayleigh amplitude
    scale = math.sqrt(2.0) * float(np.sum(taps ** 2))
    return np.hypot(re, im) / scale


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec`` to a [-1, 1] B-mode-like image and its texture-class map.

    Regions are painted back to front. Each region gets fully developed
    speckle (Rayleigh amplitude with Gaussian spatial correlation) scaled by
    its echogenicity, then the envelope is log-compressed onto [-1, 1].
    """
    size = spec.image_size
    rng = np.random.default_rng(spec.seed)
    labels = np.full((size, size), -1, dtype=np.int64)
    owner = np.full((size, size), -1, dtype=np.int64)
    for i, region in enumerate(spec.regions):
        mask = region_mask(region, size)
        labels[mask] = region.texture_class
        owner[mask] = i
    if (labels < 0).any():
        raise InvalidParameterError("regions do not cover the canvas; start with a background region")
    envelope = np.zeros((size, size))
    fields: dict[float, np.ndarray] = {}
    for i, region in enumerate(spec.regions):
        d = region.scatterer_density
        if d not in fields:
            fields[d] = _speckle_amplitude(rng, size, d)
        m = owner == i
        envelope[m] = fields[d][m] * region.echogenicity
    db = 20.0 * np.log10(np.maximum(envelope, 1e-12))
    lo, hi = -spec.dynamic_range_db, spec.headroom_db
    image = np.clip(2.0 * (db - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return image, labels


@dataclass(frozen=True)
class TextureClass:
    echogenicity: float
    scatterer_density: float = 1.0


@dataclass
class PhantomFamily:
    """Random layouts over a fixed texture palette.

    Class 0 fills the background; discs draw their class uniformly from the
    remaining classes; optional bands use ``band_class``.
    """

    image_size: int = 64
    classes: tuple[TextureClass, ...] = (
        TextureClass(0.1, 1.0),
        TextureClass(0.0, 1.0),
        TextureClass(1.0, 0.5),
    )
    # layout ranges give roughly 25 / 50 / 25 % anechoic / background / bright area
    discs: tuple[int, int] = (3, 5)
    disc_radius: tuple[float, float] = (0.16, 0.28)
    band_prob: float = 0.6
    band_class: int = 2
    band_half_width: tuple[float, float] = (0.05, 0.1)
    dynamic_range_db: float = 40.0
    headroom_db: float = 10.0
    lesion: Optional[TextureClass] = None
    lesion_radius: tuple[float, float] = (0.1, 0.16)

    def __post_init__(self):
        if isinstance(self.lesion, dict):
            self.lesion = TextureClass(**self.lesion)
        self.classes = tuple(c if isinstance(c, TextureClass) else TextureClass(**c) for c in self.classes)
        if len(self.classes) < 1:
            raise ConfigurationError("phantom family needs at least one texture class")
        if not 0 <= self.band_class < len(self.classes):
            raise ConfigurationError(f"band_class {self.band_class} out of range")

    def region(self, cls: int, shape: str, geometry: tuple = ()) -> Region:
        t = self.classes[cls]
        return Region(shape, cls, t.echogenicity, t.scatterer_density, geometry)

    def sample(self, rng: np.random.Generator, seed: Optional[int] = None, lesion: bool = False) -> PhantomSpec:
        size = self.image_size
        n_classes = len(self.classes)
        regions = [self.region(0, "background")]
        has_band = n_classes > 1 and rng.random() < self.band_prob
        if has_band:
            hw = rng.uniform(*self.band_half_width) * size
            off = rng.uniform(-0.35, 0.35) * size
            regions.append(self.region(self.band_class, "band", (off, hw, rng.uniform(-30, 30))))
        # every non-background class appears at least once so class ids stay contiguous
        needed = [c for c in range(1, n_classes) if not (has_band and c == self.band_class)]
        n = max(int(rng.integers(self.discs[0], self.discs[1] + 1)), len(needed))
        for i in range(n):
            cls = needed[i] if i < len(needed) else int(rng.integers(1, n_classes)) if n_classes > 1 else 0
            r = rng.uniform(*self.disc_radius) * size
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            regions.append(self.region(cls, "disc", (cy, cx, r)))
        if lesion:
            if self.lesion is None:
                raise ConfigurationError("family has no lesion texture configured")
            r = rng.uniform(*self.lesion_radius) * size
            cy, cx = rng.uniform(0.25, 0.75, size=2) * size
            t = self.lesion
            regions.append(Region("disc", n_classes, t.echogenicity, t.scatterer_density, (cy, cx, r)))
        if seed is None:
            seed = int(rng.integers(2 ** 31))
        return PhantomSpec(size, tuple(regions), seed, self.dynamic_range_db, self.headroom_db)


def jitter_spec(spec: PhantomSpec, rng: np.random.Generator, max_shift: float = 2.0) -> PhantomSpec:
    """Small geometric perturbation plus fresh speckle: a new frame of the same scene."""
    regions = []
    for r in spec.regions:
        if r.shape == "disc":
            cy, cx, rad = r.geometry
            dy, dx = rng.uniform(-max_shift, max_shift, size=2)
            cy = float(np.clip(cy + dy, 0, spec.image_size - 1))
            cx = float(np.clip(cx + dx, 0, spec.image_size - 1))
            r = replace(r, geometry=(cy, cx, rad))
        elif r.shape == "band":
            off, hw, ang = r.geometry
            r = replace(r, geometry=(off + rng.uniform(-max_shift, max_shift), hw, ang))
        regions.append(r)
    return replace(spec, regions=tuple(regions), seed=int(rng.integers(2 ** 31)))


def class_fractions(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=n_classes)[:n_classes] / labels.size


def write_phantom_set(
    out_dir,
    family: PhantomFamily,
    count: int,
    seed: int = 0,
    frames_per_patient: int = 1,
    organ_group: str = "phantom",
    lesion_prob: float = 0.0,
    max_shift: float = 2.0,
    prefix: str = "ph",
) -> DatasetManifest:
    """Render ``count`` phantoms (grouped into patients) with label maps and a manifest.

    Each patient is one random layout; its frames are jittered copies with
    fresh speckle. Manifest labels: ``frac_<c>`` per texture class (mean over
    the patient's frames for the ``mean_frac_<c>`` variant) and ``lesion``
    when ``lesion_prob > 0``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if count < 1 or frames_per_patient < 1:
        raise ConfigurationError("count and frames_per_patient must be >= 1")
    rng = np.random.default_rng(seed)
    n_classes = len(family.classes) + (family.lesion is not None)
    records = []
    n_patients = -(-count // frames_per_patient)
    for p in range(n_patients):
        has_lesion = lesion_prob > 0 and rng.random() < lesion_prob
        base = family.sample(rng, lesion=has_lesion)
        n_frames = min(frames_per_patient, count - p * frames_per_patient)
        frames = []
        for f in range(n_frames):
            spec = base if f == 0 else jitter_spec(base, rng, max_shift)
            image, labels = generate_phantom(spec)
            name = f"{prefix}_{p:05d}_{f:03d}"
            write_image(out_dir / f"{name}.png", image)
            Image.fromarray(labels.astype(np.uint8), mode="L").save(out_dir / f"{name}_labels.png")
            frames.append((name, f, class_fractions(labels, n_classes)))
        mean_frac = np.mean([fr for _, _, fr in frames], axis=0)
        for name, f, frac in frames:
            lab = {f"frac_{c}": float(frac[c]) for c in range(n_classes)}
            lab.update({f"mean_frac_{c}": float(mean_frac[c]) for c in range(n_classes)})
            if lesion_prob > 0:
                lab["lesion"] = bool(has_lesion)
            records.append(ManifestRecord(f"{name}.png", organ_group, f"{prefix}_{p:05d}", f, lab))
    write_manifest(out_dir / "manifest.csv", records)
    return DatasetManifest(records, out_dir)


def read_label_map(image_path) -> np.ndarray:
    """Texture-class map written next to a phantom image by :func:`write_phantom_set`."""
    p = Path(image_path)
    return np.array(Image.open(p.with_name(p.stem + "_labels.png")), dtype=np.int64)
