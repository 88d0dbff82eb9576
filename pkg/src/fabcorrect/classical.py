"""Classical segmentation baseline: Otsu threshold refined by Canny contours."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .fab import dilate, gaussian_blur


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


@dataclass(frozen=True)
class CannyParams:
    blur_sigma: float = 1.4
    low_ratio: float = 0.5
    high_ratio: float = 1.0
    snap_px: int = 2

    def __post_init__(self):
        if not 0 < self.low_ratio < self.high_ratio:
            raise ContractError(f"need 0 < low_ratio < high_ratio, got {self.low_ratio}, {self.high_ratio}")
        if self.blur_sigma < 0 or self.snap_px < 0:
            raise ContractError("blur_sigma and snap_px must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_gray(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"expected a 2-D grayscale image, got shape {img.shape}")
    return img


def otsu_threshold(image) -> OtsuResult:
    """Gray level t maximizing between-class variance of {<= t} vs {> t}.

    Works on the 256-bin histogram of the image (values rounded and clipped
    to 0..255). Scores are compared exactly in integer arithmetic, so ties
    resolve to the smallest t deterministically.
    """
    img = _as_gray(image)
    levels = np.clip(np.rint(img), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    present = np.flatnonzero(hist)
    if len(present) <= 1:
        value = int(present[0]) if len(present) else 0
        return OtsuResult(value, True)
    total_n = int(hist.sum())
    total_s = int((hist * np.arange(256)).sum())
    best_t, best_num, best_den = 0, -1, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += int(hist[t])
        s0 += t * int(hist[t])
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * N^2 = (s0*N - S*n0)^2 / (n0*n1)
        num = (s0 * total_n - total_s * n0) ** 2
        den = n0 * n1
        if best_num < 0 or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return OtsuResult(best_t, False)


PURITY = 0.9
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def sobel(image) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel derivatives with edge-replicated borders."""
    img = np.asarray(image, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            win = p[dy : dy + h, dx : dx + w]
            gx += SOBEL_X[dy, dx] * win
            gy += SOBEL_X.T[dy, dx] * win
    return gx, gy


def non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that are maximal along the gradient, direction in 4 bins."""
    h, w = mag.shape
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    bins = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    # neighbour offsets (dy, dx) across the edge for 0, 45, 90, 135 degrees
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    p = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for b, (dy, dx) in enumerate(offsets):
        fwd = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        back = p[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        sel = bins == b
        keep |= sel & (mag >= fwd) & (mag >= back)
    return keep & (mag > 0)


def hysteresis(strength: np.ndarray, candidates: np.ndarray, low: float, high: float) -> np.ndarray:
    """Candidates above ``low`` that are 8-connected to one above ``high``."""
    weak = candidates & (strength > low)
    strong = weak & (strength >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(weak)
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    good[0] = False
    return good[labels]


def canny_edges(image, params: CannyParams = CannyParams(), otsu_level: float | None = None) -> np.ndarray:
    """Canny edge mask with hysteresis bounds anchored to the Otsu level.

    The magnitude is the raw (unnormalized) Sobel response, the usual scale
    for Otsu-anchored Canny bounds: after the default blur a step of height
    d peaks near 2*d, comfortably above a mid-gray Otsu level.
    """
    img = _as_gray(image).astype(np.float64)
    blurred = gaussian_blur(img, params.blur_sigma)
    if otsu_level is None:
        otsu_level = otsu_threshold(blurred).threshold
    gx, gy = sobel(blurred)
    mag = np.hypot(gx, gy)
    # tiny magnitudes are float noise from the blur, not structure
    mag[mag < 1e-9] = 0.0
    thin = non_max_suppression(mag, gx, gy)
    low = params.low_ratio * otsu_level
    high = params.high_ratio * otsu_level
    return hysteresis(mag, thin, low, high)


def segment_threshold(image, params: CannyParams = CannyParams()) -> np.ndarray:
    """Binary silicon mask from a grayscale SEM image.

    1. Blur and take the Otsu mask.
    2. Detect Canny contours.
    3. Regions enclosed by contours (connected non-edge areas away from any
       contour by more than ``snap_px``) are set to their majority Otsu
       label, which fills noise holes and removes speckles. Regions whose
       vote is weaker than ``PURITY`` leak through an open contour and keep
       their Otsu labels.
    4. Within ``snap_px`` of a contour each pixel is classified from the
       unblurred image at the Otsu level, so the boundary snaps to the sharp
       intensity step instead of the blur-rounded one.
    """
    img = _as_gray(image).astype(np.float64)
    blurred = gaussian_blur(img, params.blur_sigma)
    otsu = otsu_threshold(blurred)
    mask = blurred > otsu.threshold
    if otsu.degenerate:
        return mask
    edges = canny_edges(img, params, otsu_level=otsu.threshold)
    near = dilate(edges, params.snap_px) if params.snap_px else edges
    mask = np.where(near, img > otsu.threshold, mask)
    labels, n = ndimage.label(~near)
    if n == 0:
        return mask
    fg = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    size = ndimage.sum_labels(np.ones_like(mask), labels, index=np.arange(1, n + 1))
    frac = fg / size
    # mixed regions mean an open contour; leave those to Otsu
    decided = (frac >= PURITY) | (frac <= 1 - PURITY)
    relabel = np.concatenate([[False], decided])
    vote = np.concatenate([[False], frac >= 0.5])
    sel = relabel[labels]
    out = mask.copy()
    out[sel] = vote[labels[sel]]
    return out
