"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is fixed at import time from ``USTEX_DISABLE_NUMBA`` (see
:mod:`ustex._accel`). Both backends are importable directly as
``ustex.kernels._numpy`` and ``ustex.kernels._numba`` for comparison.
"""
import numpy as np

from .._accel import USE_NUMBA
from ..errors import InvalidInputError, InvalidParameterError
from . import _numpy

if USE_NUMBA:
    from . import _numba as _impl

    BACKEND = "numba"
else:
    _impl = _numpy
    BACKEND = "numpy"

__all__ = [
    "BACKEND",
    "blur",
    "crop_resize",
    "gaussian_taps",
    "rank_auc",
    "rotate",
    "sparsemax",
    "svm_dual_cd",
    "svm_dual_solve",
]


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sparsemax(z, axis=-1):
    """Euclidean projection of ``z`` onto the probability simplex along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[axis] < 2:
        raise InvalidInputError("sparsemax needs at least 2 entries along the channel axis")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("sparsemax input contains non-finite values")
    moved = np.moveaxis(z, axis, -1)
    flat = _f64(moved.reshape(-1, moved.shape[-1]))
    out = _impl.sparsemax_rows(flat).reshape(moved.shape)
    return np.moveaxis(out, -1, axis)


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps truncated at radius ``ceil(3 sigma)``."""
    if sigma < 0:
        raise InvalidParameterError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    r = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-r, r + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre taps underflow to 0
        taps = np.exp(-0.5 * (t / sigma) ** 2)
    return taps / taps.sum()


def blur(img, sigma: float):
    """Separable Gaussian blur with half-sample symmetric boundaries."""
    taps = gaussian_taps(sigma)
    if taps.shape[0] == 1:
        return np.array(img, dtype=np.float64, copy=True)
    return _impl.blur_separable(_f64(img), taps)


def crop_resize(img, top: int, left: int, h: int, w: int, out_h: int, out_w: int):
    """Bilinear resample of the box ``[top:top+h, left:left+w]`` to ``out_h x out_w``.

    Pixel centres are aligned (half-pixel convention), so a box equal to the
    output size is copied exactly.
    """
    img = _f64(img)
    H, W = img.shape
    if h <= 0 or w <= 0:
        raise InvalidParameterError(f"degenerate crop {h}x{w}")
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise InvalidParameterError(f"crop box ({top}, {left}, {h}, {w}) outside {H}x{W} image")
    return _impl.crop_resize_bilinear(img, int(top), int(left), int(h), int(w), int(out_h), int(out_w))


def rotate(img, angle_deg: float, fill: float = 0.0):
    """Rotate about the image centre with bilinear sampling; uncovered pixels get ``fill``."""
    if angle_deg == 0:
        return np.array(img, dtype=np.float64, copy=True)
    return _impl.rotate_bilinear(_f64(img), float(angle_deg), float(fill))


def svm_dual_cd(x, y, upper, order, tol: float = 1e-6, max_epochs: int = 20000):
    """Dual coordinate descent for the L2-regularized hinge-loss SVM.

    Minimizes ``0.5 |w|^2 + sum_i upper_i * max(0, 1 - y_i w.x_i)``; a bias
    is modelled by the caller as a constant feature column. Returns
    ``(w, epochs, duality_gap)``; iteration stops once the gap falls below
    ``tol`` relative to the primal objective.
    """
    x, y, upper = _f64(x), _f64(y), _f64(upper)
    order = np.ascontiguousarray(order, dtype=np.int64)
    alpha = np.zeros(x.shape[0])
    return _impl.svm_dual_cd(x, y, upper, order, alpha, float(tol), int(max_epochs))


def _gap(x, y, upper, alpha, w) -> tuple[float, float]:
    ww = float(w @ w)
    primal = 0.5 * ww + float(np.sum(upper * np.maximum(0.0, 1.0 - y * (x @ w))))
    return primal - (float(alpha.sum()) - 0.5 * ww), primal


def _dual_interior_point(z, upper, tol, max_iter=200):
    """Primal-dual interior point for ``min 0.5 a'ZZ'a - sum(a)`` over ``0 <= a <= upper``.

    Each Newton step solves one dense n x n system, so the iteration count
    does not depend on how well conditioned ``Z`` is.
    """
    n = z.shape[0]
    q = z @ z.T
    a = 0.5 * upper
    lam = np.ones(n)
    mu = np.ones(n)
    for _ in range(max_iter):
        s = upper - a
        w = z.T @ a
        margin = z @ w
        primal = 0.5 * w @ w + float(np.sum(upper * np.maximum(0.0, 1.0 - margin)))
        if primal - (a.sum() - 0.5 * w @ w) <= tol * max(1.0, abs(primal)):
            break
        comp = (lam @ a + mu @ s) / (2 * n)
        sigma = 0.1 * comp
        r_dual = margin - 1.0 - lam + mu
        rhs = -r_dual + (sigma / a - lam) - (sigma / s - mu)
        d_a = np.linalg.solve(q + np.diag(lam / a + mu / s), rhs)
        d_lam = sigma / a - lam - lam / a * d_a
        d_mu = sigma / s - mu + mu / s * d_a
        step = 1.0
        for v, dv in ((a, d_a), (s, -d_a), (lam, d_lam), (mu, d_mu)):
            neg = dv < 0
            if neg.any():
                step = min(step, 0.99 * float(np.min(-v[neg] / dv[neg])))
        a = a + step * d_a
        lam = lam + step * d_lam
        mu = mu + step * d_mu
    return a


def svm_dual_solve(x, y, upper, order, tol: float = 1e-6, max_epochs: int = 2000):
    """Same problem as :func:`svm_dual_cd`, robust to ill-conditioned features.

    Coordinate descent runs first and usually converges quickly. On nearly
    collinear features it can stall far from the optimum, and the dual is
    then solved by an interior-point method instead. Returns
    ``(w, epochs, duality_gap)``, where ``epochs`` counts coordinate-descent
    sweeps.
    """
    x, y, upper = _f64(x), _f64(y), _f64(upper)
    order = np.ascontiguousarray(order, dtype=np.int64)
    w, epochs, gap = _impl.svm_dual_cd(x, y, upper, order, np.zeros(x.shape[0]), float(tol), int(max_epochs))
    _, primal = _gap(x, y, upper, np.zeros(0), w)
    if gap <= tol * max(1.0, abs(primal)):
        return w, epochs, gap
    z = x * y[:, None]
    alpha = _dual_interior_point(z, upper, tol)
    w = z.T @ alpha
    gap, _ = _gap(x, y, upper, alpha, w)
    return w, epochs, gap


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC of ``scores`` for binary ``labels``; ties count one half."""
    scores = _f64(scores).ravel()
    labels = np.ascontiguousarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int((labels > 0).sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise InvalidInputError("AUC needs both classes present")
    return float(_impl.rank_auc(scores, labels))
