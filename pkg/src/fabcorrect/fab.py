"""Synthetic fabrication oracle and SEM-style renderer.

The oracle maps a design mask to a "fabricated" mask through a signed
etch bias (disk erosion or dilation), corner rounding (Gaussian blur and
re-threshold), removal of sub-resolution features, and optional speckle
defects. It is deliberately simple so a small network can learn it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError


@dataclass(frozen=True)
class FabParams:
    etch_bias_px: int = -2
    corner_radius_px: int = 2
    min_feature_px: int = 4
    defect_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.corner_radius_px < 0 or self.min_feature_px < 0:
            raise ContractError("corner_radius_px and min_feature_px must be non-negative")
        if not 0.0 <= self.defect_rate <= 0.01:
            raise ContractError(f"defect_rate must lie in [0, 0.01], got {self.defect_rate}")

    @classmethod
    def identity(cls, seed: int = 0) -> "FabParams":
        return cls(etch_bias_px=0, corner_radius_px=0, min_feature_px=0, defect_rate=0.0, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SemRenderParams:
    fg_level: float = 150.0
    bg_level: float = 50.0
    noise_sigma: float = 20.0
    edge_glow_px: int = 2
    edge_glow_gain: float = 40.0
    brightness_gradient: float = 40.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    """Integer offsets (dy, dx) with dy^2 + dx^2 <= radius^2."""
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = mask[y + dy, x + dx], zero outside the canvas."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = mask[ys + dy : ye + dy, xs + dx : xe + dx]
    return out


def dilate(mask, radius_px: int) -> np.ndarray:
    """Binary dilation by a disk; pixels outside the canvas count as background."""
    m = np.asarray(mask).astype(bool)
    if radius_px < 0:
        raise ContractError("radius must be non-negative")
    out = np.zeros_like(m)
    for dy, dx in disk_offsets(radius_px):
        out |= _shifted(m, dy, dx)
    return out


def erode(mask, radius_px: int) -> np.ndarray:
    """Binary erosion by a disk; pixels outside the canvas count as background."""
    m = np.asarray(mask).astype(bool)
    if radius_px < 0:
        raise ContractError("radius must be non-negative")
    out = np.ones_like(m)
    for dy, dx in disk_offsets(radius_px):
        out &= _shifted(m, dy, dx)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, edge-replicated borders."""
    img = np.asarray(image, dtype=np.float64)
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, weight in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + n)
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def remove_small_features(mask, min_feature_px: int) -> np.ndarray:
    """Drop 4-connected components whose bounding box is thinner than the limit."""
    m = np.asarray(mask).astype(bool)
    if min_feature_px <= 0:
        return m.copy()
    labels, n = ndimage.label(m)
    out = m.copy()
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        h = sl[0].stop - sl[0].start
        w = sl[1].stop - sl[1].start
        if min(h, w) < min_feature_px:
            out[sl][labels[sl] == i] = False
    return out


def fabricate(design, params: FabParams) -> np.ndarray:
    """Simulated fabricated mask for a binary design."""
    m = np.asarray(design).astype(bool)
    if params.etch_bias_px < 0:
        m = erode(m, -params.etch_bias_px)
    elif params.etch_bias_px > 0:
        m = dilate(m, params.etch_bias_px)
    if params.corner_radius_px > 0:
        m = gaussian_blur(m.astype(np.float64), params.corner_radius_px) > 0.5
    m = remove_small_features(m, params.min_feature_px)
    if params.defect_rate > 0:
        rng = np.random.default_rng(params.seed)
        m = m ^ (rng.random(m.shape) < params.defect_rate)
    return m


def boundary_band(mask, width_px: int) -> np.ndarray:
    """Silicon pixels within ``width_px`` of silica (the canvas border does not count)."""
    m = np.asarray(mask).astype(bool)
    if width_px <= 0:
        return np.zeros_like(m)
    return m & dilate(~m, width_px)


def render_sem(mask, params: SemRenderParams) -> np.ndarray:
    """8-bit SEM-like rendering of a silicon mask.

    Silicon and silica are filled with their mean levels, silicon pixels
    near a boundary get brighter by ``edge_glow_gain``, a left-to-right
    linear ramp spanning ``brightness_gradient`` gray levels is added, then
    seeded Gaussian noise, and the result is rounded and clipped to 0..255.
    """
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    img = np.where(m, params.fg_level, params.bg_level).astype(np.float64)
    if params.edge_glow_px > 0 and params.edge_glow_gain:
        img += params.edge_glow_gain * boundary_band(m, params.edge_glow_px)
    if params.brightness_gradient:
        ramp = np.linspace(-0.5, 0.5, w) if w > 1 else np.zeros(1)
        img += params.brightness_gradient * ramp[None, :]
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        img += rng.normal(0.0, params.noise_sigma, size=(h, w))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
