"""Frozen-encoder evaluation: latent tables, patient aggregation, 2-D projection,
class-weighted linear probing and attention-pooled regression heads."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from . import kernels
from .data import DatasetManifest, LABEL_PREFIX, load_image
from .errors import ConfigurationError, InvalidDataError, InvalidInputError, PearsonUndefinedError
from .train import subseed

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# latent tables


@dataclass
class LatentTable:
    embeddings: np.ndarray
    organ_group: list[str]
    patient_id: list[str]
    frame_index: np.ndarray
    labels: list[dict] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        n = self.embeddings.shape[0]
        if not self.labels:
            self.labels = [{} for _ in range(n)]
        if self.embeddings.ndim != 2:
            raise InvalidInputError("embeddings must be a 2-D array")
        if not (len(self.organ_group) == len(self.patient_id) == len(self.frame_index) == len(self.labels) == n):
            raise InvalidInputError("latent table columns differ in length")
        if not np.all(np.isfinite(self.embeddings)):
            raise InvalidDataError("latent table contains non-finite embeddings")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def label(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else float(r[name]) for r in self.labels])

    def label_names(self) -> list[str]:
        names: list[str] = []
        for r in self.labels:
            names.extend(k for k in r if k not in names)
        return names

    def subset(self, idx) -> "LatentTable":
        idx = np.asarray(idx, dtype=np.int64)
        return LatentTable(
            self.embeddings[idx],
            [self.organ_group[i] for i in idx],
            [self.patient_id[i] for i in idx],
            self.frame_index[idx],
            [dict(self.labels[i]) for i in idx],
        )

    def to_csv(self, path) -> None:
        names = self.label_names()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["organ_group", "patient_id", "frame_index"]
                       + [LABEL_PREFIX + n for n in names]
                       + [f"z{i}" for i in range(self.dim)])
            for i in range(len(self)):
                labels = ["" if self.labels[i].get(n) is None else repr(float(self.labels[i][n])) for n in names]
                w.writerow([self.organ_group[i], self.patient_id[i], int(self.frame_index[i])]
                           + labels + [repr(float(v)) for v in self.embeddings[i]])

    @classmethod
    def from_csv(cls, path) -> "LatentTable":
        path = Path(path)
        if not path.is_file():
            raise InvalidInputError(f"latent table not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            zcols = [i for i, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
            lcols = [(i, h[len(LABEL_PREFIX):]) for i, h in enumerate(header) if h.startswith(LABEL_PREFIX)]
            idx = {h: i for i, h in enumerate(header)}
            emb, og, pid, fi, labels = [], [], [], [], []
            for row in reader:
                if not row:
                    continue
                emb.append([float(row[i]) for i in zcols])
                og.append(row[idx["organ_group"]])
                pid.append(row[idx["patient_id"]])
                fi.append(int(row[idx["frame_index"]]))
                labels.append({n: float(row[i]) for i, n in lcols if row[i] != ""})
        return cls(np.array(emb).reshape(len(emb), len(zcols)), og, pid, np.array(fi), labels)


def encode_dataset(model, manifest: DatasetManifest, batch_size: int = 64) -> LatentTable:
    """Encode every manifest record with the frozen model, in manifest order.

    Unreadable images are skipped and listed in ``table.errors``.
    """
    model.eval()
    size = model.config.image_size
    dtype = next(model.parameters()).dtype
    rows, errors, pending = [], [], []

    def flush():
        if not pending:
            return
        x = torch.from_numpy(np.stack([img for _, img in pending])).to(dtype)[:, None]
        with torch.no_grad():
            z = model.encode(x).values.double().numpy()
        rows.extend((r, zi) for (r, _), zi in zip(pending, z))
        pending.clear()

    for rec in manifest.records:
        try:
            img = load_image(manifest.resolve(rec), size)
        except Exception as exc:  # noqa: BLE001 - any unreadable file is reported, not fatal
            errors.append((rec.image_path, f"{type(exc).__name__}: {exc}"))
            continue
        pending.append((rec, img))
        if len(pending) >= batch_size:
            flush()
    flush()
    if errors:
        log.warning("encode_dataset: %d of %d records failed", len(errors), len(manifest))
    if not rows:
        raise InvalidDataError("no record could be encoded")
    table = LatentTable(
        np.stack([z for _, z in rows]),
        [r.organ_group for r, _ in rows],
        [r.patient_id for r, _ in rows],
        np.array([r.frame_index for r, _ in rows]),
        [{k: float(v) for k, v in r.labels.items()} for r, _ in rows],
    )
    table.errors = errors
    return table


# --------------------------------------------------------------------------
# patient aggregation


def select_frames(frame_indices: Sequence[int], n: Optional[int], rule: str, rng=None) -> np.ndarray:
    """Positions (into ``frame_indices``) of the frames chosen by ``rule``.

    ``random`` draws without replacement; ``linspace`` rounds equally spaced
    targets over the frame-index range to the nearest integer (ties to even)
    and takes the closest available frame; ``all`` keeps everything.
    """
    fi = np.asarray(frame_indices, dtype=np.int64)
    m = fi.shape[0]
    if rule not in ("random", "linspace", "all"):
        raise ConfigurationError(f"unknown frame rule {rule!r}")
    if n is not None and n < 1:
        raise ConfigurationError("frames_per_patient must be >= 1")
    if rule == "all" or n is None or n >= m:
        return np.argsort(fi, kind="stable")
    if rule == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return np.sort(rng.choice(m, size=n, replace=False))
    targets = np.rint(np.linspace(fi.min(), fi.max(), n)).astype(np.int64)
    picked: list[int] = []
    for t in targets:
        # nearest frame; ties go to the earlier position
        pos = int(np.argmin(np.abs(fi - t)))
        if pos not in picked:
            picked.append(pos)
    return np.array(picked, dtype=np.int64)


def aggregate_by_patient(
    table: LatentTable,
    frames_per_patient: Optional[int] = None,
    frame_rule: str = "all",
    rng=None,
    label_keys: Optional[Sequence[str]] = None,
) -> LatentTable:
    """Mean embedding over each patient's selected frames, one row per patient.

    ``label_keys`` restricts which labels are carried (and checked for
    per-patient consistency); by default all labels are.
    """
    if len(table) == 0:
        raise InvalidInputError("empty latent table")
    order: dict[str, list[int]] = {}
    for i, p in enumerate(table.patient_id):
        order.setdefault(p, []).append(i)
    keys = list(label_keys) if label_keys is not None else table.label_names()
    emb, og, pid, nfr, labels = [], [], [], [], []
    for p, rows in order.items():
        rows = np.array(rows)
        pos = select_frames(table.frame_index[rows], frames_per_patient, frame_rule, rng)
        chosen = rows[pos]
        lab = {}
        for k in keys:
            vals = {table.labels[i].get(k) for i in rows}
            vals.discard(None)
            if len(vals) > 1:
                raise InvalidDataError(f"patient {p!r} has conflicting values for label {k!r}: {sorted(vals)}")
            if vals:
                lab[k] = vals.pop()
        emb.append(table.embeddings[chosen].mean(axis=0))
        og.append(table.organ_group[rows[0]])
        pid.append(p)
        nfr.append(len(chosen))
        labels.append(lab)
    return LatentTable(np.stack(emb), og, pid, np.array(nfr), labels)


def patient_sequences(
    table: LatentTable,
    frames_per_patient: Optional[int],
    frame_rule: str,
    rng=None,
) -> tuple[np.ndarray, list[str], list[list[int]]]:
    """Per-patient ``(T, D)`` frame stacks (equal T required) for the regression head."""
    order: dict[str, list[int]] = {}
    for i, p in enumerate(table.patient_id):
        order.setdefault(p, []).append(i)
    seqs, pids, rows_used = [], [], []
    for p, rows in order.items():
        rows = np.array(rows)
        chosen = rows[select_frames(table.frame_index[rows], frames_per_patient, frame_rule, rng)]
        seqs.append(table.embeddings[chosen])
        pids.append(p)
        rows_used.append(chosen.tolist())
    lengths = {s.shape[0] for s in seqs}
    if len(lengths) != 1:
        t = min(lengths)
        log.info("patient_sequences: truncating sequences to %d frames", t)
        seqs = [s[:t] for s in seqs]
        rows_used = [r[:t] for r in rows_used]
    return np.stack(seqs), pids, rows_used


# --------------------------------------------------------------------------
# 2-D projection


def _pca_2d(x: np.ndarray, seed: int) -> np.ndarray:
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    coords = np.zeros((x.shape[0], 2))
    k = min(2, s.shape[0])
    for j in range(k):
        v = vt[j]
        # deterministic sign: largest-magnitude loading positive
        sign = 1.0 if v[np.argmax(np.abs(v))] >= 0 else -1.0
        coords[:, j] = sign * (xc @ v)
    return coords


def _umap_2d(x: np.ndarray, seed: int) -> np.ndarray:
    import umap  # optional dependency

    return umap.UMAP(n_components=2, random_state=seed).fit_transform(x)


PROJECTION_BACKENDS: dict[str, Callable[[np.ndarray, int], np.ndarray]] = {
    "pca": _pca_2d,
    "umap": _umap_2d,
}


def project_2d(table: Union[LatentTable, np.ndarray], backend: str = "pca", seed: int = 0) -> np.ndarray:
    """``(N, 2)`` coordinates; unavailable backends fall back to PCA with a notice."""
    x = table.embeddings if isinstance(table, LatentTable) else np.asarray(table, dtype=np.float64)
    if x.shape[0] < 3:
        raise InvalidInputError("projection needs at least 3 rows")
    fn = PROJECTION_BACKENDS.get(backend)
    if fn is None:
        log.warning("unknown projection backend %r; falling back to pca", backend)
        fn = _pca_2d
    try:
        coords = np.asarray(fn(x, seed), dtype=np.float64)
    except ImportError:
        log.warning("projection backend %r unavailable; falling back to pca", backend)
        coords = _pca_2d(x, seed)
    if coords.shape != (x.shape[0], 2) or not np.all(np.isfinite(coords)):
        raise InvalidDataError(f"projection backend {backend!r} returned invalid coordinates")
    return coords


def export_projection(path, coords: np.ndarray, table: LatentTable, label_key: Optional[str] = None,
                      plot: bool = True) -> None:
    """Write ``x,y,organ_group,patient_id,label`` rows and a scatter plot next to them."""
    path = Path(path)
    labels = table.label(label_key) if label_key else np.full(len(table), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "organ_group", "patient_id", "label"])
        for (x, y), g, p, lab in zip(coords, table.organ_group, table.patient_id, labels):
            w.writerow([repr(float(x)), repr(float(y)), g, p, "" if np.isnan(lab) else repr(float(lab))])
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        if label_key:
            sc = ax.scatter(coords[:, 0], coords[:, 1], c=labels, s=8, cmap="viridis")
            fig.colorbar(sc, ax=ax, label=label_key)
        else:
            for g in sorted(set(table.organ_group)):
                m = np.array([o == g for o in table.organ_group])
                ax.scatter(coords[m, 0], coords[m, 1], s=8, label=g)
            ax.legend(fontsize=7, markerscale=2)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path.with_suffix(".png"), dpi=120)
        plt.close(fig)


# --------------------------------------------------------------------------
# metrics


@dataclass
class ClassificationMetrics:
    accuracy: float
    f1: float
    specificity: float
    sensitivity: float
    auc: float

    def as_dict(self):
        return dict(vars(self))


@dataclass
class RegressionMetrics:
    pearson_r: float
    mae: float
    auc: float

    def as_dict(self):
        return dict(vars(self))


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def classification_metrics(scores, labels) -> ClassificationMetrics:
    """Decision metrics at threshold 0 (score > 0 is positive) plus rank AUC.

    With a single class present the AUC is undefined and reported as NaN.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if s.shape != y.shape or s.size == 0:
        raise InvalidInputError("scores and labels must be non-empty and equally long")
    pred = s > 0
    pos = y > 0
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    try:
        auc = kernels.rank_auc(s, y)
    except InvalidInputError:
        log.warning("AUC undefined: only one class present")
        auc = float("nan")
    return ClassificationMetrics(
        accuracy=(tp + tn) / y.size,
        f1=_safe_div(2 * precision * recall, precision + recall),
        specificity=_safe_div(tn, tn + fp),
        sensitivity=recall,
        auc=auc,
    )


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or a.size != b.size:
        raise InvalidInputError("pearson needs two equally long vectors of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(da @ da), float(db @ db)
    if va == 0 or vb == 0:
        raise PearsonUndefinedError("pearson correlation undefined for zero-variance input")
    return float(np.clip((da @ db) / math.sqrt(va * vb), -1.0, 1.0))


def regression_metrics(preds, targets, threshold: Optional[float] = None) -> RegressionMetrics:
    """Pearson r, MAE, and the AUC of ``preds`` for ``targets >= threshold``.

    When r is undefined the raised error carries the remaining metrics (with
    r = NaN) as ``exc.metrics``.
    """
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size < 2 or p.size != t.size:
        raise InvalidInputError("preds and targets must be equally long with at least 2 samples")
    mae = float(np.mean(np.abs(p - t)))
    auc = float("nan")
    if threshold is not None:
        binary = (t >= threshold).astype(np.int64)
        if 0 < binary.sum() < binary.size:
            auc = kernels.rank_auc(p, binary)
    try:
        r = pearson_r(p, t)
    except PearsonUndefinedError as exc:
        exc.metrics = RegressionMetrics(float("nan"), mae, auc)
        raise
    return RegressionMetrics(r, mae, auc)


# --------------------------------------------------------------------------
# protocol & report


@dataclass
class EvalProtocol:
    task: str = "classification"
    label: Optional[str] = None
    frames_per_patient: Optional[int] = None
    frame_rule: str = "all"
    cv_folds: Union[int, str] = 5
    classification_threshold: Optional[float] = None
    probe_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    inner_folds: int = 3
    seed: int = 0
    repeats: int = 10
    epochs: int = 200
    learning_rate: float = 1e-3
    hidden_dim: int = 64
    value_dim: int = 64

    def __post_init__(self):
        self.probe_grid = tuple(float(c) for c in self.probe_grid)
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"task must be classification or regression, got {self.task!r}")
        if self.frame_rule not in ("random", "linspace", "all"):
            raise ConfigurationError(f"unknown frame_rule {self.frame_rule!r}")
        if isinstance(self.cv_folds, str):
            if self.cv_folds not in ("loo", "leave-one-out"):
                raise ConfigurationError(f"cv_folds must be an integer >= 2 or 'loo', got {self.cv_folds!r}")
            self.cv_folds = "loo"
        elif self.cv_folds < 2:
            raise ConfigurationError("cv_folds must be >= 2")
        if self.frames_per_patient is not None and self.frames_per_patient < 1:
            raise ConfigurationError("frames_per_patient must be >= 1")
        if not self.probe_grid or any(c <= 0 for c in self.probe_grid):
            raise ConfigurationError("probe_grid needs positive regularization strengths")
        if self.repeats < 1 or self.epochs < 1 or self.inner_folds < 2:
            raise ConfigurationError("repeats and epochs must be >= 1, inner_folds >= 2")


@dataclass
class MetricsReport:
    task: str
    metrics: dict[str, float]
    per_fold: list[dict] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    n_folds: int = 0
    details: dict = field(default_factory=dict)


def _mean_std(rows: list[dict], keys: Sequence[str]):
    mean, std = {}, {}
    for k in keys:
        v = np.array([r[k] for r in rows], dtype=np.float64)
        v = v[np.isfinite(v)]
        mean[k] = float(v.mean()) if v.size else float("nan")
        std[k] = float(v.std()) if v.size else float("nan")
    return mean, std


def write_metrics_table(path, rows: Sequence[tuple[str, str, MetricsReport]]) -> None:
    """One line per (dataset, model): each metric's headline value and its std."""
    keys: list[str] = []
    for _, _, rep in rows:
        keys.extend(k for k in rep.mean if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "model"] + [c for k in keys for c in (k, f"{k}_std")])
        for dataset, model, rep in rows:
            vals = []
            for k in keys:
                head = rep.metrics.get(k, rep.mean.get(k, float("nan")))
                vals += [f"{head:.6g}", f"{rep.std.get(k, float('nan')):.6g}"]
            w.writerow([dataset, model] + vals)


# --------------------------------------------------------------------------
# patient-level folds


def patient_folds(patient_ids: Sequence[str], n_folds: Union[int, str], rng: np.random.Generator,
                  strata: Optional[dict] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Row-index splits in which no patient appears on both sides.

    Patients are shuffled and dealt round-robin, within each stratum when
    ``strata`` maps patient -> class, so every fold sees both classes.
    """
    pids = list(dict.fromkeys(patient_ids))
    k = len(pids) if n_folds == "loo" else int(n_folds)
    if k < 2 or k > len(pids):
        raise ConfigurationError(f"cannot make {k} folds from {len(pids)} patients")
    fold_of: dict[str, int] = {}
    if strata is None:
        groups = [pids]
    else:
        keys = sorted({strata[p] for p in pids})
        groups = [[p for p in pids if strata[p] == s] for s in keys]
    offset = 0
    for g in groups:
        perm = rng.permutation(len(g))
        for j, i in enumerate(perm):
            fold_of[g[i]] = (offset + j) % k
        offset += len(g)
    rows = np.array([fold_of[p] for p in patient_ids])
    splits = []
    for f in range(k):
        test = np.flatnonzero(rows == f)
        train = np.flatnonzero(rows != f)
        if test.size:
            splits.append((train, test))
    return splits


def assert_disjoint_patients(patient_ids: Sequence[str], train: np.ndarray, test: np.ndarray) -> None:
    a = {patient_ids[i] for i in train}
    b = {patient_ids[i] for i in test}
    shared = a & b
    if shared:
        raise InvalidDataError(f"patients in both train and test: {sorted(shared)[:5]}")


# --------------------------------------------------------------------------
# linear probe


@dataclass
class LinearSVC:
    """Class-weighted soft-margin linear SVM (hinge + L2) on standardized features.

    ``C`` multiplies each sample's hinge term together with its class weight
    ``n / n_class``. The bias is a regularized constant feature.
    """

    C: float = 1.0
    tol: float = 1e-6
    max_epochs: int = 2000
    seed: int = 0
    mean_: np.ndarray = field(default=None, init=False, repr=False)
    scale_: np.ndarray = field(default=None, init=False, repr=False)
    coef_: np.ndarray = field(default=None, init=False, repr=False)
    intercept_: float = field(default=0.0, init=False)
    class_weight_: dict = field(default_factory=dict, init=False)
    gap_: float = field(default=float("nan"), init=False)

    def fit(self, x, y) -> "LinearSVC":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y).astype(np.int64).ravel()
        classes = np.unique(y)
        if classes.size != 2:
            raise InvalidDataError("linear probe needs both classes in the training data")
        self.mean_ = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        xs = self._standardize(x)
        n = y.size
        self.class_weight_ = {int(c): n / np.sum(y == c) for c in classes}
        ys = np.where(y > 0, 1.0, -1.0)
        upper = self.C * np.array([self.class_weight_[int(c)] for c in y])
        xa = np.hstack([xs, np.ones((n, 1))])
        order = np.random.default_rng(self.seed).permutation(n)
        w, epochs, gap = kernels.svm_dual_solve(xa, ys, upper, order, self.tol, self.max_epochs)
        primal = 0.5 * w @ w + np.sum(upper * np.maximum(0.0, 1.0 - ys * (xa @ w)))
        if gap > self.tol * max(1.0, primal):
            log.warning("linear probe stopped after %d epochs with duality gap %.3g", epochs, gap)
        self.coef_, self.intercept_, self.gap_ = w[:-1], float(w[-1]), float(gap)
        return self

    def _standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean_) / self.scale_

    def decision_function(self, x) -> np.ndarray:
        return self._standardize(x) @ self.coef_ + self.intercept_

    def predict(self, x) -> np.ndarray:
        return (self.decision_function(x) > 0).astype(np.int64)


def _select_c(x, y, pids, protocol: EvalProtocol, rng) -> float:
    strata = {p: int(lab) for p, lab in zip(pids, y)}
    n_pat = len(set(pids))
    k = min(protocol.inner_folds, n_pat)
    try:
        splits = patient_folds(pids, k, rng, strata if _each_patient_one_label(pids, y) else None)
    except ConfigurationError:
        return protocol.probe_grid[0]
    best_c, best_acc = protocol.probe_grid[0], -1.0
    for c in protocol.probe_grid:
        accs = []
        for tr, te in splits:
            if np.unique(y[tr]).size < 2:
                continue
            clf = LinearSVC(C=c, seed=protocol.seed).fit(x[tr], y[tr])
            accs.append(np.mean(clf.predict(x[te]) == y[te]))
        acc = float(np.mean(accs)) if accs else -1.0
        if acc > best_acc:
            best_c, best_acc = c, acc
    return best_c


def _each_patient_one_label(pids, y) -> bool:
    seen: dict = {}
    for p, v in zip(pids, y):
        if seen.setdefault(p, v) != v:
            return False
    return True


def fit_linear_probe(table: LatentTable, labels, protocol: EvalProtocol) -> MetricsReport:
    """Patient-level cross-validated, grid-searched linear SVM probe.

    ``labels`` is a binary array aligned with the table or the name of a
    label column. Decisions pooled over held-out folds give the headline
    metrics; per-fold metrics give mean and std.
    """
    y = table.label(labels) if isinstance(labels, str) else np.asarray(labels, dtype=np.float64)
    if y.shape[0] != len(table) or np.any(np.isnan(y)):
        raise InvalidInputError("probe labels missing or misaligned with the latent table")
    y = (y > 0.5).astype(np.int64)
    pids = table.patient_id
    rng = np.random.default_rng(subseed(protocol.seed, "probe"))
    strata = {p: int(v) for p, v in zip(pids, y)} if _each_patient_one_label(pids, y) else None
    splits = patient_folds(pids, protocol.cv_folds, rng, strata)
    x = table.embeddings
    scores = np.full(len(table), np.nan)
    per_fold, chosen = [], []
    for f, (tr, te) in enumerate(splits):
        assert_disjoint_patients(pids, tr, te)
        if np.unique(y[tr]).size < 2:
            log.warning("fold %d skipped: training split has a single class", f)
            continue
        tr_pids = [pids[i] for i in tr]
        c = _select_c(x[tr], y[tr], tr_pids, protocol, rng)
        clf = LinearSVC(C=c, seed=protocol.seed).fit(x[tr], y[tr])
        s = clf.decision_function(x[te])
        scores[te] = s
        chosen.append(c)
        per_fold.append({"fold": f, "C": c, "n_test": int(te.size), **classification_metrics(s, y[te]).as_dict()})
    if not per_fold:
        raise InvalidDataError("every fold was skipped: no training split had both classes")
    done = ~np.isnan(scores)
    pooled = classification_metrics(scores[done], y[done]).as_dict()
    keys = list(pooled)
    mean, std = _mean_std(per_fold, keys)
    return MetricsReport("classification", pooled, per_fold, mean, std, len(per_fold),
                         {"C": chosen, "scores": scores, "labels": y})


# --------------------------------------------------------------------------
# regression head


def temporal_attention_pool(frames: torch.Tensor, score: nn.Module, value: nn.Module, mask=None):
    """Softmax-over-time attention pooling.

    ``frames`` is ``(N, T, F)`` (or ``(T, F)``); ``score`` maps features to
    one logit per frame and ``value`` to the pooled representation. Returns
    ``(pooled, weights)`` with weights ``(N, T)``.
    """
    single = frames.dim() == 2
    if single:
        frames = frames[None]
    if frames.shape[1] < 1:
        raise InvalidInputError("attention pooling needs at least one frame")
    logits = score(frames).squeeze(-1)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    pooled = (weights.unsqueeze(-1) * value(frames)).sum(dim=1)
    return (pooled[0], weights[0]) if single else (pooled, weights)


class RegressionHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int = 64, value_dim: int = 64):
        super().__init__()
        self.frame_mlp = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, hidden_dim))
        self.score = nn.Linear(hidden_dim, 1)
        self.value = nn.Linear(hidden_dim, value_dim)
        self.out = nn.Linear(value_dim, 1)

    def forward(self, x, mask=None):
        pooled, _ = temporal_attention_pool(self.frame_mlp(x), self.score, self.value, mask)
        return self.out(pooled).squeeze(-1)


def _train_head(x_tr, y_tr, protocol: EvalProtocol, seed: int) -> RegressionHead:
    torch.manual_seed(seed)
    head = RegressionHead(x_tr.shape[-1], protocol.hidden_dim, protocol.value_dim).double()
    opt = torch.optim.Adam(head.parameters(), lr=protocol.learning_rate)
    xt = torch.from_numpy(x_tr)
    yt = torch.from_numpy(y_tr)
    for _ in range(protocol.epochs):
        opt.zero_grad()
        loss = torch.mean((head(xt) - yt) ** 2)
        loss.backward()
        opt.step()
    return head


def fit_regressor(
    sequences,
    targets,
    protocol: EvalProtocol,
    patient_ids: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Cross-validated attention-pooled regression, repeated over seeds.

    ``sequences`` is ``(N, T, D)``, one sequence per patient. Each repeat
    re-initializes the heads (same folds) and scores the pooled held-out
    predictions; the report gives mean and std across repeats.
    """
    x = np.asarray(sequences, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None]
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError("sequences and targets differ in length")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("regression targets must be finite")
    if np.var(y) == 0:
        raise PearsonUndefinedError("targets have zero variance")
    pids = list(patient_ids) if patient_ids is not None else [str(i) for i in range(len(y))]
    splits = patient_folds(pids, protocol.cv_folds, np.random.default_rng(subseed(protocol.seed, "regress-folds")))
    per_repeat = []
    all_preds = []
    for r in range(protocol.repeats):
        preds = np.full(y.shape, np.nan)
        for f, (tr, te) in enumerate(splits):
            assert_disjoint_patients(pids, tr, te)
            mu = x[tr].reshape(-1, x.shape[-1]).mean(axis=0)
            sd = x[tr].reshape(-1, x.shape[-1]).std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            ym, ys = y[tr].mean(), y[tr].std() or 1.0
            head = _train_head((x[tr] - mu) / sd, (y[tr] - ym) / ys, protocol,
                               subseed(protocol.seed, "regressor", r, f))
            with torch.no_grad():
                preds[te] = head(torch.from_numpy((x[te] - mu) / sd)).numpy() * ys + ym
        m = regression_metrics(preds, y, protocol.classification_threshold)
        per_repeat.append({"repeat": r, **m.as_dict()})
        all_preds.append(preds)
    keys = ["pearson_r", "mae", "auc"]
    mean, std = _mean_std(per_repeat, keys)
    return MetricsReport("regression", dict(mean), per_repeat, mean, std, len(splits),
                         {"predictions": np.array(all_preds), "targets": y})


# --------------------------------------------------------------------------
# texture specialization diagnostics


@dataclass
class TextureSpecialization:
    agreement: float
    mapping: dict[int, int]
    usage_entropy: float
    intensity_order: list[int]
    ordered_classes: list[int]
    echogenicity_ordered: bool


def channel_class_agreement(channel_map, class_map) -> tuple[float, dict[int, int]]:
    """Pixel agreement after mapping each channel to its majority class."""
    ch = np.asarray(channel_map, dtype=np.int64).ravel()
    cl = np.asarray(class_map, dtype=np.int64).ravel()
    if ch.shape != cl.shape or ch.size == 0:
        raise InvalidInputError("channel and class maps must be non-empty and equally shaped")
    table = np.zeros((ch.max() + 1, cl.max() + 1), dtype=np.int64)
    np.add.at(table, (ch, cl), 1)
    mapping = {int(c): int(table[c].argmax()) for c in range(table.shape[0]) if table[c].any()}
    return float(table.max(axis=1).sum() / ch.size), mapping


def channel_usage_entropy(weights) -> float:
    """Entropy of the mean channel usage over a batch of ``(N, K, H, W)`` weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 3:
        w = w[None]
    p = w.mean(axis=(0, 2, 3))
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def texture_specialization(model, images, class_maps, echogenicity: Sequence[float],
                           batch_size: int = 50) -> TextureSpecialization:
    """Score how well argmax texture channels recover generating texture classes.

    Channels are sorted by the mean intensity of the pixels they dominate;
    the ordering holds when the mapped classes' echogenicities never increase
    along that sort.
    """
    from .train import channel_order

    model.eval()
    dtype = next(model.parameters()).dtype
    imgs = np.asarray(images)
    ws = []
    with torch.no_grad():
        for i in range(0, len(imgs), batch_size):
            x = torch.from_numpy(imgs[i:i + batch_size]).to(dtype)[:, None]
            ws.append(model.segment(x).weights.double().numpy())
    w = np.concatenate(ws)
    agreement, mapping = channel_class_agreement(w.argmax(axis=1), class_maps)
    order = [int(c) for c in channel_order(w, imgs) if int(c) in mapping]
    classes = [mapping[c] for c in order]
    echo = [echogenicity[c] for c in classes]
    ordered = all(a >= b for a, b in zip(echo, echo[1:]))
    return TextureSpecialization(agreement, mapping, channel_usage_entropy(w), order, classes, ordered)
