"""Benchmark shape families rasterized onto binary canvases."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractError

FAMILIES = ("grating", "star", "cross", "circle", "hole_array", "rectangle", "taper")
MARGIN = 2


@dataclass(frozen=True)
class ShapeSpec:
    """A shape family plus its geometry; unset geometry keys take defaults.

    Geometry keys per family (pixels unless noted):
      grating: period, duty (fraction)
      star: points, inner_radius, outer_radius, rotation (radians)
      cross: arm_width, arm_length
      circle: radius
      hole_array: pitch, hole_radius
      rectangle: width, height
      taper: width_start, width_end, length
    Shapes are centred on the canvas plus an optional (cy, cx) offset.
    """

    family: str
    geometry: dict = field(default_factory=dict)
    width: int = 64
    height: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if self.width < 2 * MARGIN + 1 or self.height < 2 * MARGIN + 1:
            raise ContractError(f"canvas {self.width}x{self.height} is too small")

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray, float, float]:
    yy, xx = np.mgrid[: spec.height, : spec.width].astype(np.float64)
    # pixel centres sit at half-integers
    yy += 0.5
    xx += 0.5
    g = spec.geometry
    cy = spec.height / 2 + g.get("cy", 0.0)
    cx = spec.width / 2 + g.get("cx", 0.0)
    return yy, xx, cy, cx


def _check_extent(spec: ShapeSpec, cy: float, cx: float, half_h: float, half_w: float) -> None:
    if (
        cy - half_h < MARGIN
        or cx - half_w < MARGIN
        or cy + half_h > spec.height - MARGIN
        or cx + half_w > spec.width - MARGIN
    ):
        raise ContractError(
            f"{spec.family} geometry {spec.geometry} exceeds the {spec.width}x{spec.height} canvas"
            f" (needs a {MARGIN} px margin)"
        )


def _grating(spec, yy, xx, cy, cx):
    g = {"period": 16, "duty": 0.5, **spec.geometry}
    period, duty = int(g["period"]), float(g["duty"])
    if period <= 0 or not 0 < duty < 1:
        raise ContractError(f"grating needs period > 0 and 0 < duty < 1, got {period}, {duty}")
    stripe = int(round(period * duty))
    if stripe < 1:
        raise ContractError("grating stripe width rounds to zero")
    h, w = spec.height, spec.width
    n = w // period
    # whole periods, centred; each stripe sits in the middle of its period
    start = (w - n * period) // 2 + (period - stripe) // 2
    mask = np.zeros((h, w), dtype=bool)
    for k in range(n):
        mask[MARGIN : h - MARGIN, start + k * period : start + k * period + stripe] = True
    if n == 0 or start < MARGIN or w - (start + (n - 1) * period + stripe) < MARGIN:
        raise ContractError(f"grating period {period} / duty {duty} leaves no {MARGIN} px side margin")
    return mask


def _circle(spec, yy, xx, cy, cx):
    r = float(spec.geometry.get("radius", min(spec.width, spec.height) / 4))
    if r <= 0:
        raise ContractError("circle radius must be positive")
    _check_extent(spec, cy, cx, r, r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rectangle(spec, yy, xx, cy, cx):
    g = {"width": spec.width / 2, "height": spec.height / 3, **spec.geometry}
    w, h = float(g["width"]), float(g["height"])
    if w <= 0 or h <= 0:
        raise ContractError("rectangle sides must be positive")
    _check_extent(spec, cy, cx, h / 2, w / 2)
    return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)


def _cross(spec, yy, xx, cy, cx):
    g = {"arm_width": min(spec.width, spec.height) / 6, "arm_length": min(spec.width, spec.height) * 0.7, **spec.geometry}
    aw, al = float(g["arm_width"]), float(g["arm_length"])
    if aw <= 0 or al < aw:
        raise ContractError("cross needs 0 < arm_width <= arm_length")
    _check_extent(spec, cy, cx, al / 2, al / 2)
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    return ((dy <= aw / 2) & (dx <= al / 2)) | ((dx <= aw / 2) & (dy <= al / 2))


def _inside_polygon(yy, xx, vertices) -> np.ndarray:
    """Even-odd point-in-polygon test for arrays of points."""
    inside = np.zeros(yy.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        y0, x0 = vertices[i]
        y1, x1 = vertices[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (yy >= min(y0, y1)) & (yy < max(y0, y1))
        x_at = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < x_at)
    return inside


def _star(spec, yy, xx, cy, cx):
    m = min(spec.width, spec.height)
    g = {"points": 5, "inner_radius": m * 0.15, "outer_radius": m * 0.4, "rotation": 0.0, **spec.geometry}
    k, ri, ro, rot = int(g["points"]), float(g["inner_radius"]), float(g["outer_radius"]), float(g["rotation"])
    if k < 3 or not 0 < ri < ro:
        raise ContractError("star needs points >= 3 and 0 < inner_radius < outer_radius")
    _check_extent(spec, cy, cx, ro, ro)
    verts = []
    for i in range(2 * k):
        r = ro if i % 2 == 0 else ri
        a = rot - math.pi / 2 + math.pi * i / k
        verts.append((cy + r * math.sin(a), cx + r * math.cos(a)))
    return _inside_polygon(yy, xx, verts)


def _hole_array(spec, yy, xx, cy, cx):
    m = min(spec.width, spec.height)
    g = {"pitch": m / 4, "hole_radius": m / 12, **spec.geometry}
    pitch, hr = float(g["pitch"]), float(g["hole_radius"])
    if pitch <= 0 or hr <= 0 or 2 * hr >= pitch:
        raise ContractError("hole_array needs 0 < 2*hole_radius < pitch")
    mask = np.zeros(yy.shape, dtype=bool)
    mask[MARGIN : spec.height - MARGIN, MARGIN : spec.width - MARGIN] = True
    ny = int((spec.height - 2 * MARGIN) // pitch)
    nx = int((spec.width - 2 * MARGIN) // pitch)
    if ny < 1 or nx < 1:
        raise ContractError(f"hole_array pitch {pitch} does not fit the canvas")
    y0 = cy - (ny - 1) * pitch / 2
    x0 = cx - (nx - 1) * pitch / 2
    for i in range(ny):
        for j in range(nx):
            mask &= (yy - (y0 + i * pitch)) ** 2 + (xx - (x0 + j * pitch)) ** 2 > hr * hr
    return mask


def _taper(spec, yy, xx, cy, cx):
    g = {"width_start": spec.height / 8, "width_end": spec.height / 2.5, "length": spec.width * 0.8, **spec.geometry}
    w0, w1, length = float(g["width_start"]), float(g["width_end"]), float(g["length"])
    if w0 <= 0 or w1 <= 0 or length <= 0:
        raise ContractError("taper widths and length must be positive")
    _check_extent(spec, cy, cx, max(w0, w1) / 2, length / 2)
    t = (xx - (cx - length / 2)) / length
    half = (w0 + (w1 - w0) * t) / 2
    return (t >= 0) & (t <= 1) & (np.abs(yy - cy) <= half)


_RENDERERS = {
    "grating": _grating,
    "star": _star,
    "cross": _cross,
    "circle": _circle,
    "hole_array": _hole_array,
    "rectangle": _rectangle,
    "taper": _taper,
}


def generate_shape(spec: ShapeSpec) -> np.ndarray:
    """Deterministic binary mask for ``spec`` (True = silicon)."""
    yy, xx, cy, cx = _grid(spec)
    return _RENDERERS[spec.family](spec, yy, xx, cy, cx).astype(bool)


def sample_spec(family: str, width: int, height: int, rng: np.random.Generator) -> ShapeSpec:
    """Random geometry for ``family`` that fits the canvas."""
    m = min(width, height)
    if family == "grating":
        period = int(rng.integers(12, max(13, m // 3)))
        geo = {"period": period, "duty": float(rng.uniform(0.35, 0.65))}
    elif family == "star":
        ro = float(rng.uniform(0.28, 0.42) * m)
        geo = {
            "points": int(rng.integers(4, 8)),
            "outer_radius": ro,
            "inner_radius": float(ro * rng.uniform(0.4, 0.65)),
            "rotation": float(rng.uniform(0, 2 * math.pi)),
        }
        room = max(0.0, m / 2 - ro - MARGIN - 1)
        geo.update(cy=float(rng.uniform(-room, room)), cx=float(rng.uniform(-room, room)))
    elif family == "cross":
        al = float(rng.uniform(0.5, 0.85) * m)
        geo = {"arm_length": al, "arm_width": float(rng.uniform(0.15, 0.3) * al)}
        room = max(0.0, m / 2 - al / 2 - MARGIN - 1)
        geo.update(cy=float(rng.uniform(-room, room)), cx=float(rng.uniform(-room, room)))
    elif family == "circle":
        r = float(rng.uniform(0.15, 0.4) * m)
        room = max(0.0, m / 2 - r - MARGIN - 1)
        geo = {"radius": r, "cy": float(rng.uniform(-room, room)), "cx": float(rng.uniform(-room, room))}
    elif family == "hole_array":
        pitch = float(rng.uniform(0.2, 0.34) * m)
        geo = {"pitch": pitch, "hole_radius": float(pitch * rng.uniform(0.18, 0.32))}
    elif family == "rectangle":
        w = float(rng.uniform(0.2, 0.8) * m)
        h = float(rng.uniform(0.2, 0.8) * m)
        geo = {
            "width": w,
            "height": h,
            "cy": float(rng.uniform(-1, 1) * max(0.0, m / 2 - h / 2 - MARGIN - 1)),
            "cx": float(rng.uniform(-1, 1) * max(0.0, m / 2 - w / 2 - MARGIN - 1)),
        }
    elif family == "taper":
        geo = {
            "width_start": float(rng.uniform(0.1, 0.25) * m),
            "width_end": float(rng.uniform(0.3, 0.6) * m),
            "length": float(rng.uniform(0.5, 0.85) * m),
        }
        if rng.random() < 0.5:
            geo["width_start"], geo["width_end"] = geo["width_end"], geo["width_start"]
    else:
        raise ContractError(f"unknown shape family {family!r}")
    return ShapeSpec(family, geo, width, height, int(rng.integers(2**31)))
