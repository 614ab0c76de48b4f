"""On-disk phantom datasets: one ``.rvol`` per volume and truth mask plus a manifest."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingInputError
from .phantom import PhantomCase
from .volume import (
    Volume,
    center_crop,
    mask_to_volume,
    preprocess,
    read_volume,
    volume_to_mask,
    write_volume,
)

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ("index", "label", "split", "volume", "truth")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    index: int
    label: int
    split: str
    volume: str
    truth: str


def case_paths(index: int) -> tuple[str, str]:
    return f"case_{index:04d}.rvol", f"case_{index:04d}.truth.rvol"


def write_dataset(out_dir, parts: dict[str, list[PhantomCase]]) -> list[ManifestRow]:
    """Write every case and a manifest sorted by case index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        for case in parts.get(split, []):
            vol, truth = case_paths(case.index)
            write_volume(case.volume, out / vol)
            write_volume(mask_to_volume(case.truth), out / truth)
            rows.append(ManifestRow(case.index, case.label, split, vol, truth))
    rows.sort(key=lambda r: r.index)
    lines = ["\t".join(MANIFEST_HEADER)] + [
        f"{r.index}\t{r.label}\t{r.split}\t{r.volume}\t{r.truth}" for r in rows
    ]
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return rows


def read_manifest(data_dir) -> list[ManifestRow]:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise MissingInputError(f"dataset manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise FormatError(f"manifest header must be {'<TAB>'.join(MANIFEST_HEADER)}", field="manifest")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise FormatError(f"line {n}: expected {len(MANIFEST_HEADER)} columns", field="manifest")
        try:
            row = ManifestRow(int(parts[0]), int(parts[1]), parts[2], parts[3], parts[4])
        except ValueError as exc:
            raise FormatError(f"line {n}: {exc}", field="manifest") from exc
        if row.split not in SPLITS or row.label not in (0, 1):
            raise FormatError(f"line {n}: bad split or label", field="manifest")
        rows.append(row)
    return rows


@dataclass(frozen=True)
class LoadedSplit:
    rows: list[ManifestRow]
    x: np.ndarray
    y: np.ndarray
    volumes: list[Volume]
    truths: list[np.ndarray]


def load_split(data_dir, split: str, crop_dims=None) -> LoadedSplit:
    """Read one split and apply the model preprocessing (crop, then normalize)."""
    data_dir = Path(data_dir)
    rows = [r for r in read_manifest(data_dir) if r.split == split]
    if not rows:
        raise MissingInputError(f"split {split!r} is empty in {data_dir}")
    target = tuple(crop_dims) if crop_dims else None
    volumes, truths = [], []
    for r in rows:
        volumes.append(preprocess(read_volume(data_dir / r.volume), target))
        truth = read_volume(data_dir / r.truth)
        if target is not None:
            truth = center_crop(truth, target)
        truths.append(volume_to_mask(truth))
    x = np.stack([v.voxels for v in volumes])
    y = np.array([r.label for r in rows], dtype=np.int64)
    return LoadedSplit(rows, x, y, volumes, truths)
