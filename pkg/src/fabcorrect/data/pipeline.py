"""Benchmark assembly, augmentation, tiling and train/validation splits."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..errors import ContractError, InvalidShapeError
from ..fab import FabParams, SemRenderParams, fabricate, render_sem
from .shapes import FAMILIES, generate_shape, sample_spec


@dataclass
class SamplePair:
    """A design raster, its fabricated counterpart and an optional SEM render."""

    id: str
    design: np.ndarray
    fabricated: np.ndarray
    sem: np.ndarray | None = None
    family: str = ""
    base_id: str = ""
    fab_hash: str = ""

    def __post_init__(self):
        self.design = np.asarray(self.design).astype(bool)
        self.fabricated = np.asarray(self.fabricated).astype(bool)
        if self.design.shape != self.fabricated.shape:
            raise InvalidShapeError(f"{self.id}: design {self.design.shape} vs fabricated {self.fabricated.shape}")
        if self.sem is not None:
            self.sem = np.asarray(self.sem, dtype=np.uint8)
            if self.sem.shape != self.design.shape:
                raise InvalidShapeError(f"{self.id}: sem {self.sem.shape} vs design {self.design.shape}")
        if not self.base_id:
            self.base_id = self.id


def build_benchmark(
    n_per_family: int,
    canvas: int | tuple[int, int] = 64,
    fab_params: FabParams = FabParams(),
    seed: int = 0,
    sem_params: SemRenderParams | None = None,
    families: Sequence[str] = FAMILIES,
) -> list[SamplePair]:
    """``n_per_family`` random shapes per family, fabricated (and optionally rendered).

    Sample ``k`` of family ``f`` draws its geometry from its own generator
    seeded by (seed, family index, k), so adding families or samples does
    not perturb the others.
    """
    if n_per_family < 1:
        raise ContractError("n_per_family must be >= 1")
    h, w = (canvas, canvas) if isinstance(canvas, int) else canvas
    pairs = []
    fab_hash = fab_params.digest()
    for fi, family in enumerate(families):
        if family not in FAMILIES:
            raise ContractError(f"unknown shape family {family!r}")
        for k in range(n_per_family):
            rng = np.random.default_rng([seed, FAMILIES.index(family), k])
            spec = sample_spec(family, w, h, rng)
            design = generate_shape(spec)
            sample_fab = replace(fab_params, seed=int(rng.integers(2**63)))
            fab = fabricate(design, sample_fab)
            sem = None
            if sem_params is not None:
                sem = render_sem(fab, replace(sem_params, seed=int(rng.integers(2**63))))
            pid = f"{family}-{k:04d}"
            pairs.append(SamplePair(pid, design, fab, sem, family=family, base_id=pid, fab_hash=fab_hash))
    return pairs


def dataset_hash(pairs: Sequence[SamplePair]) -> str:
    """sha256 over ids and raster bytes, in dataset order."""
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.id.encode())
        h.update(np.packbits(p.design).tobytes())
        h.update(np.packbits(p.fabricated).tobytes())
        if p.sem is not None:
            h.update(p.sem.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class AugmentConfig:
    passes: int = 3
    per_transform_probability: float = 0.5
    rotation_limit_deg: float = 15.0
    shift_limit_frac: float = 0.1
    scale_limits: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 15.0
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.passes < 0:
            raise ContractError("passes must be >= 0")
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ContractError("per_transform_probability must lie in [0, 1]")
        lo, hi = self.scale_limits
        if not 0 < lo <= hi:
            raise ContractError(f"invalid scale_limits {self.scale_limits}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_limits"] = list(self.scale_limits)
        return d


TRANSFORMS = ("hflip", "rotate", "shift", "scale", "noise", "brightness", "contrast")


def _affine_matrix(shape, angle_deg: float, scale: float, shift: tuple[float, float], hflip: bool):
    """Output->input mapping for scipy's affine_transform (row, col coords)."""
    h, w = shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    m = rot / scale
    if hflip:
        m = m @ np.diag([1.0, -1.0])
    offset = c - m @ (c + np.asarray(shift))
    return m, offset


def _warp(img: np.ndarray, matrix, offset, order: int, cval: float) -> np.ndarray:
    return ndimage.affine_transform(
        img.astype(np.float64), matrix, offset=offset, order=order, mode="constant", cval=cval
    )


def hflip_pair(pair: SamplePair) -> SamplePair:
    return SamplePair(
        pair.id,
        pair.design[:, ::-1],
        pair.fabricated[:, ::-1],
        None if pair.sem is None else pair.sem[:, ::-1],
        pair.family,
        pair.base_id,
        pair.fab_hash,
    )


def augment(pair: SamplePair, config: AugmentConfig, index: int = 0) -> list[SamplePair]:
    """The original pair followed by ``config.passes`` augmented copies.

    In every pass each transform is kept independently with
    ``per_transform_probability``. Geometric transforms move all rasters
    together (nearest-neighbour for masks, bilinear for the SEM image);
    noise, brightness and contrast touch the SEM image only. ``index``
    decorrelates the random draws of different pairs under one seed.
    """
    out = [pair]
    shape = pair.design.shape
    for k in range(config.passes):
        rng = np.random.default_rng([config.seed, index, k])
        keep = {t: bool(rng.random() < config.per_transform_probability) for t in TRANSFORMS}
        # draw every parameter regardless of keep so the stream is stable
        angle = rng.uniform(-config.rotation_limit_deg, config.rotation_limit_deg)
        shift = rng.uniform(-config.shift_limit_frac, config.shift_limit_frac, size=2) * np.array(shape)
        scale = rng.uniform(*config.scale_limits)
        noise_sigma = rng.uniform(0, config.noise_sigma)
        brightness = rng.uniform(-config.brightness_limit, config.brightness_limit)
        contrast = rng.uniform(-config.contrast_limit, config.contrast_limit)
        noise_seed = int(rng.integers(2**63))

        design, fab, sem = pair.design, pair.fabricated, pair.sem
        geometric = keep["rotate"] or keep["shift"] or keep["scale"]
        if keep["hflip"] and not geometric:
            design, fab = design[:, ::-1], fab[:, ::-1]
            sem = None if sem is None else sem[:, ::-1]
        elif geometric or keep["hflip"]:
            m, off = _affine_matrix(
                shape,
                angle if keep["rotate"] else 0.0,
                scale if keep["scale"] else 1.0,
                tuple(shift) if keep["shift"] else (0.0, 0.0),
                keep["hflip"],
            )
            design = _warp(design, m, off, 0, 0.0) > 0.5
            fab = _warp(fab, m, off, 0, 0.0) > 0.5
            if sem is not None:
                # fill uncovered area with the darkest (silica) level seen
                sem = _warp(sem, m, off, 1, float(np.percentile(sem, 5)))
        if sem is not None:
            s = sem.astype(np.float64)
            if keep["contrast"]:
                s = (s - s.mean()) * (1 + contrast) + s.mean()
            if keep["brightness"]:
                s = s + brightness * 255.0
            if keep["noise"]:
                s = s + np.random.default_rng(noise_seed).normal(0, noise_sigma, s.shape)
            sem = np.clip(np.rint(s), 0, 255).astype(np.uint8)
        out.append(
            SamplePair(f"{pair.id}-aug{k}", design, fab, sem, pair.family, pair.base_id, pair.fab_hash)
        )
    return out


def augment_all(pairs: Sequence[SamplePair], config: AugmentConfig) -> list[SamplePair]:
    out = []
    for i, p in enumerate(pairs):
        out.extend(augment(p, config, index=i))
    return out


@dataclass(frozen=True)
class Tile:
    row: int
    col: int
    y: int
    x: int
    data: np.ndarray
    pad_bottom: int = 0
    pad_right: int = 0


def patchify(image, patch: int, fill=0) -> list[Tile]:
    """Row-major non-overlapping ``patch``-square tiles, padding edges with ``fill``."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise InvalidShapeError(f"patchify expects a 2-D raster, got {img.shape}")
    if patch < 1:
        raise ContractError("patch must be >= 1")
    h, w = img.shape
    ny, nx = -(-h // patch), -(-w // patch)
    tiles = []
    for r in range(ny):
        for c in range(nx):
            y, x = r * patch, c * patch
            block = img[y : y + patch, x : x + patch]
            pb, pr = patch - block.shape[0], patch - block.shape[1]
            if pb or pr:
                block = np.pad(block, ((0, pb), (0, pr)), constant_values=fill)
            tiles.append(Tile(r, c, y, x, block.copy(), pb, pr))
    return tiles


def stitch(tiles: Sequence[Tile], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Reassemble tiles; ``shape`` crops away padding (defaults to the unpadded extent)."""
    if not tiles:
        raise ContractError("no tiles to stitch")
    p = tiles[0].data.shape[0]
    ny = max(t.row for t in tiles) + 1
    nx = max(t.col for t in tiles) + 1
    out = np.zeros((ny * p, nx * p), dtype=tiles[0].data.dtype)
    for t in tiles:
        out[t.y : t.y + p, t.x : t.x + p] = t.data
    if shape is None:
        bottom = max((t.pad_bottom for t in tiles if t.row == ny - 1), default=0)
        right = max((t.pad_right for t in tiles if t.col == nx - 1), default=0)
        shape = (ny * p - bottom, nx * p - right)
    return out[: shape[0], : shape[1]]


@dataclass
class Split:
    train: list[SamplePair]
    val: list[SamplePair]
    seed: int = 0
    val_ids: list[str] = field(default_factory=list)

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Training order for ``epoch``; a pure function of (seed, epoch)."""
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.train))


def split_and_shuffle(dataset: Sequence[SamplePair], val_fraction: float, seed: int) -> Split:
    """Split by base shape id so augmented copies never straddle the split."""
    if not 0 < val_fraction < 1:
        raise ContractError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    bases = sorted({p.base_id for p in dataset})
    n_val = int(round(len(bases) * val_fraction))
    if n_val == 0 or n_val == len(bases):
        raise ContractError(
            f"{len(bases)} base shapes at val_fraction {val_fraction} leave an empty side"
        )
    perm = np.random.default_rng(seed).permutation(len(bases))
    val_bases = {bases[i] for i in perm[:n_val]}
    train = [p for p in dataset if p.base_id not in val_bases]
    val = [p for p in dataset if p.base_id in val_bases]
    return Split(train, val, seed, sorted(val_bases))
