"""Slow, obviously-correct reference implementations used by the tests.

Each function here is written independently of the package code it checks
(plain loops, no shared helpers) so agreement is meaningful.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, pad=None):
    """Cross-correlation with zero padding by explicit loops."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(xp[i, c, y + u, z + v]) * float(w[o, c, u, v])
                    out[i, o, y, z] = acc + (0.0 if b is None else float(b[o]))
    return out


def iou_loops(a, b):
    inter = union = 0
    for p, q in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        inter += bool(p) and bool(q)
        union += bool(p) or bool(q)
    return 1.0 if union == 0 else inter / union


def bce_loops(p, y, eps=1e-7):
    total = 0.0
    flat_p = np.asarray(p, dtype=np.float64).ravel().tolist()
    flat_y = np.asarray(y, dtype=np.float64).ravel().tolist()
    for pi, yi in zip(flat_p, flat_y):
        pi = min(max(pi, eps), 1 - eps)
        total -= yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return total / len(flat_p)


def dice_loops(p, y, smooth=1.0):
    inter = sp = sy = 0.0
    for pi, yi in zip(np.asarray(p, float).ravel().tolist(), np.asarray(y, float).ravel().tolist()):
        inter += pi * yi
        sp += pi
        sy += yi
    return 1 - (2 * inter + smooth) / (sp + sy + smooth)


def otsu_exhaustive(image):
    """Try all 256 thresholds; classes {<= t} vs {> t}; smallest best t wins."""
    vals = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(int).ravel().tolist()
    best_t, best = None, -1.0
    n = len(vals)
    for t in range(256):
        lo = [v for v in vals if v <= t]
        hi = [v for v in vals if v > t]
        if not lo or not hi:
            continue
        w0, w1 = len(lo) / n, len(hi) / n
        m0, m1 = sum(lo) / len(lo), sum(hi) / len(hi)
        score = w0 * w1 * (m0 - m1) ** 2
        if score > best * (1 + 1e-12) + 1e-12:
            best_t, best = t, score
    return best_t


def disk_sweep(radius):
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if dy * dy + dx * dx <= radius * radius]


def dilate_sweep(mask, radius):
    """out[y, x] = any mask[y + dy, x + dx] over the disk, outside = 0."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy, dx in disk_sweep(radius):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                    out[y, x] = True
                    break
    return out


def erode_sweep(mask, radius):
    """out[y, x] = all mask[y + dy, x + dx] over the disk, outside = 0."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy, dx in disk_sweep(radius):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w and mask[yy, xx]):
                    ok = False
                    break
            out[y, x] = ok
    return out


def gaussian_blur_direct(image, sigma):
    """Direct 2-D convolution with a truncated, renormalized separable Gaussian."""
    img = np.asarray(image, dtype=np.float64)
    r = int(math.ceil(3 * sigma))
    k1 = [math.exp(-0.5 * (t / sigma) ** 2) for t in range(-r, r + 1)]
    s = sum(k1)
    k1 = [v / s for v in k1]
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    yy = min(max(y + u, 0), h - 1)
                    xx = min(max(x + v, 0), w - 1)
                    acc += k1[u + r] * k1[v + r] * img[yy, xx]
            out[y, x] = acc
    return out


def point_in_rings(px, py, rings):
    """Even-odd crossing count of a horizontal ray to +x over all rings."""
    inside = False
    for ring in rings:
        for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
            if (y0 <= py < y1) or (y1 <= py < y0):
                xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
                if px < xi:
                    inside = not inside
    return inside


def rasterize_points(rings, h, w):
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = point_in_rings(j + 0.5, h - i - 0.5, rings)
    return out


def signed_area(ring):
    return 0.5 * sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(ring, ring[1:]))


def real8_reference(value):
    """GDSII 8-byte real via the textbook repeated-division algorithm."""
    if value == 0:
        return bytes(8)
    sign = 0
    if value < 0:
        sign = 1
        value = -value
    exponent = 64
    while value >= 1:
        value /= 16.0
        exponent += 1
    while value < 1 / 16:
        value *= 16.0
        exponent -= 1
    mantissa = int(round(value * 2**56))
    if mantissa >= 2**56:
        mantissa //= 16
        exponent += 1
    return bytes([(sign << 7) | exponent]) + mantissa.to_bytes(7, "big")
