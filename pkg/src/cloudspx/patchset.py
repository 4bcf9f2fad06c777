"""Labeled 32x32 patch datasets: manifests, stratified splits, batch loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

PATCH_SIZE = 32
N_CLASSES = 4


class ClassLabel(IntEnum):
    THICK_CLOUD = 0
    CIRRUS_CLOUD = 1
    BUILDING = 2
    OTHER_CULTURE = 3


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class Patch:
    """Classifier input: RGB pixels in [0,1] plus the region's NIR mean."""

    pixels: np.ndarray  # (32, 32, 3) float64 in [0, 1]
    mean_nir: float
    tile_id: str
    region_id: int

    def __post_init__(self):
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise DatasetError(f"patch shape {self.pixels.shape} != {PATCH_SIZE}x{PATCH_SIZE}x3")


@dataclass(frozen=True)
class ManifestEntry:
    tile_id: str
    region_id: int
    label: ClassLabel
    path: str  # patch PNG, relative to the manifest's directory
    mean_nir: float


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.tile_id, e.region_id)
            if key in seen:
                raise DatasetError(f"duplicate label for region {key}")
            seen.add(key)

    @property
    def class_counts(self) -> list[int]:
        counts = [0] * N_CLASSES
        for e in self.entries:
            counts[int(e.label)] += 1
        return counts

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w") as f:
            for e in self.entries:
                f.write(
                    json.dumps(
                        {
                            "tile_id": e.tile_id,
                            "region_id": e.region_id,
                            "label": int(e.label),
                            "path": e.path,
                            "mean_nir": e.mean_nir,
                        }
                    )
                    + "\n"
                )

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        path = Path(path)
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            entries.append(
                ManifestEntry(
                    tile_id=d["tile_id"],
                    region_id=int(d["region_id"]),
                    label=ClassLabel(d["label"]),
                    path=d["path"],
                    mean_nir=float(d["mean_nir"]),
                )
            )
        return Manifest(entries=entries, root=path.parent)


@dataclass(frozen=True)
class Batch:
    pixels: np.ndarray  # (B, 3, 32, 32) float32 in [0, 1]
    labels: np.ndarray  # (B,) int64
    mean_nir: np.ndarray  # (B,) float64


def label_file_bytes(tile_id: str, labels: dict[int, int]) -> bytes:
    """Canonical label-file JSON ({tile_id, labels}), keys in numeric order.

    One serializer for both auto-labeling and the label server keeps the two
    byte-compatible.
    """
    obj = {"tile_id": tile_id, "labels": {str(k): int(labels[k]) for k in sorted(labels)}}
    return (json.dumps(obj, indent=2) + "\n").encode()


def save_label_file(path: str | Path, tile_id: str, labels: dict[int, int]) -> None:
    Path(path).write_bytes(label_file_bytes(tile_id, labels))


def load_label_file(path: str | Path) -> tuple[str, dict[int, ClassLabel]]:
    d = json.loads(Path(path).read_text())
    return d["tile_id"], {int(k): ClassLabel(v) for k, v in d["labels"].items()}


def build_dataset(
    tiles: dict,
    maps: dict,
    label_files: Iterable[tuple[str, dict[int, ClassLabel]]],
    out_dir: str | Path,
) -> Manifest:
    """Extract one patch per labeled region and write patches + manifest.

    tiles and maps are keyed by tile_id; label_files yields (tile_id, labels)
    pairs as produced by the annotator or by auto-labeling. Unlabeled regions
    are skipped. Raises on labels for nonexistent regions and on duplicate
    (tile_id, region_id) labels.
    """
    from . import superpixel  # deferred: superpixel imports Patch from here

    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    entries = []
    seen = set()
    for tile_id, labels in label_files:
        if tile_id not in tiles or tile_id not in maps:
            raise DatasetError(f"labels reference unknown tile {tile_id!r}")
        img = tiles[tile_id]
        spmap = maps[tile_id]
        stats = superpixel.region_stats(spmap, img)
        for region_id in sorted(labels):
            if region_id < 0 or region_id >= spmap.n_regions:
                raise DatasetError(
                    f"label for nonexistent region ({tile_id!r}, {region_id})"
                )
            if (tile_id, region_id) in seen:
                raise DatasetError(f"duplicate label for region ({tile_id!r}, {region_id})")
            seen.add((tile_id, region_id))
            patch = superpixel.extract_patch(img, stats[region_id], tile_id=tile_id)
            rel = f"patches/{tile_id}_{region_id:05d}.png"
            pixels8 = np.round(patch.pixels * 255.0).astype(np.uint8)
            Image.fromarray(pixels8, mode="RGB").save(out_dir / rel)
            entries.append(
                ManifestEntry(
                    tile_id=tile_id,
                    region_id=region_id,
                    label=ClassLabel(int(labels[region_id])),
                    path=rel,
                    mean_nir=float(stats[region_id].mean_nir),
                )
            )
    manifest = Manifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def split(manifest: Manifest, test_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Stratified train/test split, deterministic in seed.

    Per class the test share is round-half-up(count * test_fraction). Classes
    with exactly one entry cannot be stratified and raise.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(N_CLASSES)}
    for i, e in enumerate(manifest.entries):
        by_class[int(e.label)].append(i)

    test_idx: set[int] = set()
    for c in range(N_CLASSES):
        idx = by_class[c]
        if len(idx) == 1:
            raise DatasetError(f"class {ClassLabel(c).name} has a single entry, cannot stratify")
        if not idx:
            continue
        n_test = int(len(idx) * test_fraction + 0.5)
        perm = rng.permutation(len(idx))
        test_idx.update(idx[j] for j in perm[:n_test])

    train = [e for i, e in enumerate(manifest.entries) if i not in test_idx]
    test = [e for i, e in enumerate(manifest.entries) if i in test_idx]
    return (
        Manifest(entries=train, root=manifest.root),
        Manifest(entries=test, root=manifest.root),
    )


def load_batch(manifest: Manifest, indices: Iterable[int]) -> Batch:
    """Load patches at `indices` (order preserved) as a CHW float32 batch."""
    indices = list(indices)
    if manifest.root is None:
        raise DatasetError("manifest has no root directory; load it from disk or set root")
    pixels = np.empty((len(indices), 3, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    labels = np.empty(len(indices), dtype=np.int64)
    nir = np.empty(len(indices), dtype=np.float64)
    for row, i in enumerate(indices):
        e = manifest.entries[i]
        p = manifest.root / e.path
        if not p.is_file():
            raise DatasetError(f"missing patch file {p}")
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        pixels[row] = arr.transpose(2, 0, 1)
        labels[row] = int(e.label)
        nir[row] = e.mean_nir
    return Batch(pixels=pixels, labels=labels, mean_nir=nir)
