"""Dataset directories: paired PNG files plus a tab-separated manifest."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from ..errors import FormatError
from ..layout.png import png_read, png_write
from .pipeline import SamplePair, dataset_hash

MANIFEST = "manifest.tsv"
FIELDS = ("id", "family", "base_id", "design", "fabricated", "sem", "fab_hash")


def save_dataset(pairs: Sequence[SamplePair], directory: str | Path) -> str:
    """Write ``pairs`` under ``directory``; returns the dataset hash."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in pairs:
        row = {
            "id": p.id,
            "family": p.family,
            "base_id": p.base_id,
            "design": f"{p.id}_design.png",
            "fabricated": f"{p.id}_fab.png",
            "sem": f"{p.id}_sem.png" if p.sem is not None else "",
            "fab_hash": p.fab_hash,
        }
        png_write(root / row["design"], p.design)
        png_write(root / row["fabricated"], p.fabricated)
        if p.sem is not None:
            png_write(root / row["sem"], p.sem)
        rows.append(row)
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return dataset_hash(pairs)


def load_dataset(directory: str | Path) -> list[SamplePair]:
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            missing = [k for k in ("id", "design", "fabricated") if not row.get(k)]
            if missing:
                raise FormatError(f"manifest row lacks {missing}: {row}")
            sem = png_read(root / row["sem"]) if row.get("sem") else None
            pairs.append(
                SamplePair(
                    row["id"],
                    png_read(root / row["design"], as_mask=True),
                    png_read(root / row["fabricated"], as_mask=True),
                    sem,
                    family=row.get("family", ""),
                    base_id=row.get("base_id", ""),
                    fab_hash=row.get("fab_hash", ""),
                )
            )
    return pairs
