"""Conversion between polygon sets and binary rasters.

Raster/layout frame: the canvas spans ``origin`` (lower-left corner, in
database units) upward and rightward. Image row 0 is the top of the
canvas, so pixel (row i, col j) of an H-row canvas covers
x in [j, j+1] and y in [H-1-i, H-i] pixel units above the origin.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ContractError
from .gds import PolySet


def rasterize(
    polyset: PolySet | Sequence[PolySet],
    canvas: tuple[int, int],
    origin: tuple[float, float] = (0.0, 0.0),
    px_per_dbu: float = 1.0,
) -> np.ndarray:
    """Boolean (H, W) mask; a pixel is set iff its centre is inside (even-odd).

    Parity is taken jointly over all rings of all given polysets, so a hole
    ring inside an outer ring clears its interior.
    """
    if px_per_dbu <= 0:
        raise ContractError("px_per_dbu must be positive")
    h, w = canvas
    sets = [polyset] if isinstance(polyset, PolySet) else list(polyset)
    segs = []
    for ps in sets:
        for ring in ps.polygons:
            pts = np.asarray(ring, dtype=np.float64)
            if len(pts) < 2:
                continue
            # pixel-unit coordinates relative to the canvas corner
            pts = (pts - np.asarray(origin, dtype=np.float64)) * px_per_dbu
            segs.append(np.concatenate([pts[:-1], pts[1:]], axis=1))
    mask = np.zeros((h, w), dtype=bool)
    if not segs:
        return mask
    s = np.concatenate(segs)
    x0, y0, x1, y1 = s.T
    keep = y0 != y1
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    ylo, yhi = np.minimum(y0, y1), np.maximum(y0, y1)
    xc = np.arange(w) + 0.5
    for i in range(h):
        yc = h - i - 0.5
        hit = (ylo <= yc) & (yc < yhi)
        if not hit.any():
            continue
        xs = x0[hit] + (yc - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit])
        xs.sort()
        # count crossings strictly to the right of each centre (ray towards +x)
        mask[i] = (len(xs) - np.searchsorted(xs, xc, side="right")) % 2 == 1
    return mask


def _boundary_edges(mask: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Directed unit edges between silicon and background, silicon on the left."""
    h, w = mask.shape
    padded = np.pad(mask, 1)
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(a, b):
        out.setdefault(a, []).append(b)

    for i, j in zip(*np.nonzero(mask)):
        i, j = int(i), int(j)
        y = h - 1 - i
        if not padded[i + 2, j + 1]:  # below
            add((j, y), (j + 1, y))
        if not padded[i, j + 1]:  # above
            add((j + 1, y + 1), (j, y + 1))
        if not padded[i + 1, j + 2]:  # right
            add((j + 1, y), (j + 1, y + 1))
        if not padded[i + 1, j]:  # left
            add((j, y + 1), (j, y))
    return out


def _drop_collinear(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    pts = ring[:-1]
    changed = True
    while changed and len(pts) > 3:
        changed = False
        keep = []
        n = len(pts)
        for k in range(n):
            a, b, c = pts[k - 1], pts[k], pts[(k + 1) % n]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if cross != 0 or (a == c):
                keep.append(b)
            else:
                changed = True
        pts = keep
    return pts


def _canonical(pts: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Rotate to start at the lowest-then-leftmost vertex and close the ring."""
    k = min(range(len(pts)), key=lambda t: (pts[t][1], pts[t][0]))
    pts = pts[k:] + pts[:k]
    return pts + [pts[0]]


def _point_line_distance(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    norm = np.hypot(dx, dy)
    if norm == 0:
        return float(np.hypot(px - ax, py - ay))
    return abs(dx * (py - ay) - dy * (px - ax)) / norm


def _ring_area2(pts) -> int:
    n = len(pts)
    return sum(pts[k][0] * pts[(k + 1) % n][1] - pts[(k + 1) % n][0] * pts[k][1] for k in range(n))


def simplify_ring(pts: list[tuple[int, int]], tol: float) -> list[tuple[int, int]]:
    """Greedily drop the vertex closest to its neighbours' chord while within ``tol``.

    Accepts open or closed rings and returns the same form.
    """
    pts = [tuple(p) for p in pts]
    closed = len(pts) > 1 and pts[0] == pts[-1]
    if closed:
        return _canonical(simplify_ring(pts[:-1], tol))
    sign = np.sign(_ring_area2(pts))
    while len(pts) > 3:
        n = len(pts)
        dists = [_point_line_distance(pts[k], pts[k - 1], pts[(k + 1) % n]) for k in range(n)]
        k = int(np.argmin(dists))
        if dists[k] > tol:
            break
        trial = pts[:k] + pts[k + 1 :]
        if np.sign(_ring_area2(trial)) != sign:
            break
        pts = trial
    return pts


def vectorize(
    mask,
    simplify_tol_px: float = 0.0,
    layer: int = 1,
    datatype: int = 0,
    dbu_nm: float = 1.0,
    origin: tuple[int, int] = (0, 0),
    dbu_per_px: int = 1,
) -> PolySet:
    """Trace the boundaries of 4-connected silicon components into rings.

    Outer boundaries come out counterclockwise and hole boundaries
    clockwise (layout frame, y up). Where two components touch only at a
    corner the tracer turns left, keeping them as separate rings. At
    ``simplify_tol_px = 0`` only collinear vertices are removed, so
    ``rasterize(vectorize(m), m.shape) == m``.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ContractError(f"vectorize expects a 2-D mask, got shape {m.shape}")
    if simplify_tol_px < 0:
        raise ContractError("simplify_tol_px must be non-negative")
    out_edges = _boundary_edges(m)
    rings = []
    visited: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    for start in sorted(out_edges, key=lambda p: (p[1], p[0])):
        for first in sorted(out_edges[start]):
            edge = (start, first)
            if edge in visited:
                continue
            ring = [start]
            while edge not in visited:
                visited.add(edge)
                ring.append(edge[1])
                edge = _successor(out_edges, edge)
            pts = _drop_collinear(ring)
            if simplify_tol_px > 0:
                pts = simplify_ring(pts, simplify_tol_px)
            pts = [(origin[0] + x * dbu_per_px, origin[1] + y * dbu_per_px) for x, y in pts]
            rings.append(_canonical(pts))
    return PolySet(layer, datatype, rings, dbu_nm)


def _successor(out_edges, edge):
    """Next boundary edge; at a saddle vertex the left turn is taken."""
    (ax, ay), b = edge
    options = out_edges[b]
    if len(options) == 1:
        return (b, options[0])
    dx, dy = b[0] - ax, b[1] - ay
    left = (b[0] - dy, b[1] + dx)
    return (b, left)
