"""Pure-numpy reference kernels.

Each function mirrors the signature of its counterpart in ``_numba`` and
expects contiguous float64 inputs; argument checking happens in the
package ``__init__``.
"""
import numpy as np


def sparsemax_rows(z):
    k = z.shape[1]
    # stable descending sort: ties ordered by index
    order = np.argsort(-z, axis=1, kind="stable")
    zs = np.take_along_axis(z, order, axis=1)
    cssv = np.cumsum(zs, axis=1)
    rho = np.arange(1, k + 1, dtype=z.dtype)
    support = 1.0 + rho * zs > cssv
    size = support.sum(axis=1)
    tau = (cssv[np.arange(z.shape[0]), size - 1] - 1.0) / size
    return np.maximum(z - tau[:, None], 0.0)


def _reflect_index(idx, n):
    # half-sample symmetric extension (d c b a | a b c d | d c b a)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def blur_separable(img, taps):
    r = (taps.shape[0] - 1) // 2
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        base = np.arange(n)
        acc = out.copy()
        for j in range(-r, r + 1):
            if j == 0:
                continue
            src = np.take(out, _reflect_index(base + j, n), axis=axis)
            # x + sum w (x_shift - x): constant inputs stay bit-exact
            acc += taps[j + r] * (src - out)
        out = acc
    return out


def crop_resize_bilinear(img, top, left, h, w, out_h, out_w):
    sy = top + (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = left + (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, top, top + h - 1)
    sx = np.clip(sx, left, left + w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, top + h - 1)
    x1 = np.minimum(x0 + 1, left + w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    a = img[y0[:, None], x0[None, :]]
    b = img[y0[:, None], x1[None, :]]
    c = img[y1[:, None], x0[None, :]]
    d = img[y1[:, None], x1[None, :]]
    top_row = a + fx * (b - a)
    bottom_row = c + fx * (d - c)
    return top_row + fy * (bottom_row - top_row)


def rotate_bilinear(img, angle_deg, fill):
    h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    sy = cos_t * yy - sin_t * xx + cy
    sx = sin_t * yy + cos_t * xx + cx
    # tolerance absorbs round-off in cos/sin at multiples of 90 degrees
    eps = 1e-9
    inside = (sy >= -eps) & (sy <= h - 1 + eps) & (sx >= -eps) & (sx <= w - 1 + eps)
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    top_row = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bottom_row = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    out = top_row + fy * (bottom_row - top_row)
    return np.where(inside, out, fill)


def svm_dual_cd(x, y, upper, order, alpha, tol, max_epochs):
    # alpha is a warm start and is updated in place
    w = x.T @ (alpha * y)
    qii = np.einsum("ij,ij->i", x, x)
    gap = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for i in order:
            if qii[i] <= 0.0:
                continue
            g = y[i] * (w @ x[i]) - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= upper[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                a_new = min(max(a - g / qii[i], 0.0), upper[i])
                w += (a_new - a) * y[i] * x[i]
                alpha[i] = a_new
        ww = w @ w
        primal = 0.5 * ww + np.sum(upper * np.maximum(0.0, 1.0 - y * (x @ w)))
        dual = alpha.sum() - 0.5 * ww
        gap = primal - dual
        if gap <= tol * max(1.0, abs(primal)):
            break
    return w, epoch, gap


def rank_auc(scores, labels):
    n = scores.shape[0]
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(n)
    # average rank over runs of tied scores
    _, start, counts = np.unique(s, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    pos = labels > 0
    n_pos = pos.sum()
    n_neg = n - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
