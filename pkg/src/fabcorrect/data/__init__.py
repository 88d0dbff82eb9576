"""Benchmark shapes, augmentation, tiling, splits and persistence."""
from .pipeline import (
    AugmentConfig,
    SamplePair,
    Split,
    Tile,
    augment,
    augment_all,
    build_benchmark,
    dataset_hash,
    hflip_pair,
    patchify,
    split_and_shuffle,
    stitch,
)
from .shapes import FAMILIES, ShapeSpec, generate_shape, sample_spec
from .store import load_dataset, save_dataset

__all__ = [
    "FAMILIES",
    "AugmentConfig",
    "SamplePair",
    "ShapeSpec",
    "Split",
    "Tile",
    "augment",
    "augment_all",
    "build_benchmark",
    "dataset_hash",
    "generate_shape",
    "hflip_pair",
    "load_dataset",
    "patchify",
    "sample_spec",
    "save_dataset",
    "split_and_shuffle",
    "stitch",
]
