"""numba-compiled kernels; see ``_numpy`` for the reference semantics."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def sparsemax_rows(z):
    n, k = z.shape
    out = np.empty_like(z)
    for r in range(n):
        row = z[r]
        zs = row[np.argsort(-row, kind="mergesort")]
        cs = 0.0
        size = 0
        tau_sum = 0.0
        for j in range(k):
            cs += zs[j]
            if 1.0 + (j + 1) * zs[j] > cs:
                size = j + 1
                tau_sum = cs
        tau = (tau_sum - 1.0) / size
        for j in range(k):
            v = row[j] - tau
            out[r, j] = v if v > 0.0 else 0.0
    return out


@njit(cache=True)
def _reflect(i, n):
    period = 2 * n
    i = i % period
    if i < 0:
        i += period
    if i >= n:
        i = period - 1 - i
    return i


@njit(cache=True)
def blur_separable(img, taps):
    h, w = img.shape
    r = (taps.shape[0] - 1) // 2
    tmp = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            c = img[y, x]
            acc = c
            for j in range(-r, r + 1):
                if j != 0:
                    acc += taps[j + r] * (img[_reflect(y + j, h), x] - c)
            tmp[y, x] = acc
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            c = tmp[y, x]
            acc = c
            for j in range(-r, r + 1):
                if j != 0:
                    acc += taps[j + r] * (tmp[y, _reflect(x + j, w)] - c)
            out[y, x] = acc
    return out


@njit(cache=True)
def crop_resize_bilinear(img, top, left, h, w, out_h, out_w):
    out = np.empty((out_h, out_w))
    ry = h / out_h
    rx = w / out_w
    for i in range(out_h):
        sy = top + (i + 0.5) * ry - 0.5
        sy = min(max(sy, top), top + h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, top + h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = left + (j + 0.5) * rx - 0.5
            sx = min(max(sx, left), left + w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, left + w - 1)
            fx = sx - x0
            a = img[y0, x0]
            b = img[y0, x1]
            c = img[y1, x0]
            d = img[y1, x1]
            t = a + fx * (b - a)
            u = c + fx * (d - c)
            out[i, j] = t + fy * (u - t)
    return out


@njit(cache=True)
def rotate_bilinear(img, angle_deg, fill):
    h, w = img.shape
    theta = angle_deg * math.pi / 180.0
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    out = np.empty_like(img)
    for i in range(h):
        yy = i - cy
        for j in range(w):
            xx = j - cx
            sy = cos_t * yy - sin_t * xx + cy
            sx = sin_t * yy + cos_t * xx + cx
            # tolerance absorbs round-off in cos/sin at multiples of 90 degrees
            if sy < -1e-9 or sy > h - 1 + 1e-9 or sx < -1e-9 or sx > w - 1 + 1e-9:
                out[i, j] = fill
                continue
            sy = min(max(sy, 0.0), h - 1.0)
            sx = min(max(sx, 0.0), w - 1.0)
            y0 = int(math.floor(sy))
            x0 = int(math.floor(sx))
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            fy = sy - y0
            fx = sx - x0
            t = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
            u = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
            out[i, j] = t + fy * (u - t)
    return out


@njit(cache=True)
def svm_dual_cd(x, y, upper, order, alpha, tol, max_epochs):
    # alpha is a warm start and is updated in place
    n, d = x.shape
    w = np.zeros(d)
    for i in range(n):
        if alpha[i] != 0.0:
            for k in range(d):
                w[k] += alpha[i] * y[i] * x[i, k]
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += x[i, k] * x[i, k]
        qii[i] = s
    gap = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for t in range(n):
            i = order[t]
            if qii[i] <= 0.0:
                continue
            s = 0.0
            for k in range(d):
                s += w[k] * x[i, k]
            g = y[i] * s - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= upper[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                a_new = min(max(a - g / qii[i], 0.0), upper[i])
                step = (a_new - a) * y[i]
                for k in range(d):
                    w[k] += step * x[i, k]
                alpha[i] = a_new
        ww = 0.0
        for k in range(d):
            ww += w[k] * w[k]
        loss = 0.0
        asum = 0.0
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += w[k] * x[i, k]
            m = 1.0 - y[i] * s
            if m > 0.0:
                loss += upper[i] * m
            asum += alpha[i]
        primal = 0.5 * ww + loss
        gap = primal - (asum - 0.5 * ww)
        if gap <= tol * max(1.0, abs(primal)):
            break
    return w, epoch, gap


@njit(cache=True)
def rank_auc(scores, labels):
    n = scores.shape[0]
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    n_pos = 0
    rsum = 0.0
    for t in range(n):
        if labels[t] > 0:
            n_pos += 1
            rsum += ranks[t]
    n_neg = n - n_pos
    u = rsum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
