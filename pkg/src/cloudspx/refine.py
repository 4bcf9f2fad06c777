"""Post-classification refinement of per-region predictions.

Two passes run in a fixed order. First, thick-cloud regions whose mean NIR
falls below a reflectance floor are demoted to building (bright roofs mimic
cloud in RGB but stay dark in NIR). Second, cirrus and building regions are
compared against their spatial neighborhood: if the nearest thick-cloud
neighbor is closer in fused-feature cosine distance than the nearest
other-culture neighbor, the region is pulled back to thick cloud. The second
pass is simultaneous: all decisions read the labels as they stood before the
pass began.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .patchset import ClassLabel, N_CLASSES

NIR_CLOUD_FLOOR = 1000.0
FUSED_DIM = 144


class RefineError(Exception):
    pass


@dataclass(frozen=True)
class RegionPrediction:
    region_id: int
    probs_cnn: np.ndarray
    probs_forest: np.ndarray
    label: ClassLabel
    mean_nir: float | None = None
    feature: np.ndarray | None = field(default=None, repr=False)
    relabeled: bool = False


def ensemble_class(probs_cnn: np.ndarray, probs_forest: np.ndarray) -> ClassLabel:
    """Argmax of the two distributions' mean; ties go to the lower class id."""
    mean = (np.asarray(probs_cnn, dtype=np.float64)
            + np.asarray(probs_forest, dtype=np.float64)) / 2.0
    if mean.shape != (N_CLASSES,):
        raise ValueError(f"expected two length-{N_CLASSES} distributions")
    return ClassLabel(int(mean.argmax()))


def fuse_feature(cnn_feature: np.ndarray, class_vector: np.ndarray) -> np.ndarray:
    """128-d CNN feature followed by the 16-d forest class vector."""
    cnn_feature = np.asarray(cnn_feature, dtype=np.float64).ravel()
    class_vector = np.asarray(class_vector, dtype=np.float64).ravel()
    if cnn_feature.size + class_vector.size != FUSED_DIM:
        raise ValueError(
            f"fused feature must have {FUSED_DIM} dims, "
            f"got {cnn_feature.size}+{class_vector.size}"
        )
    return np.concatenate([cnn_feature, class_vector])


def make_prediction(region_id: int, probs_cnn, cnn_feature, probs_forest,
                    class_vector, mean_nir: float) -> RegionPrediction:
    """Assemble a region's prediction from both model outputs."""
    return RegionPrediction(
        region_id=region_id,
        probs_cnn=np.asarray(probs_cnn, dtype=np.float64),
        probs_forest=np.asarray(probs_forest, dtype=np.float64),
        label=ensemble_class(probs_cnn, probs_forest),
        mean_nir=float(mean_nir),
        feature=fuse_feature(cnn_feature, class_vector),
    )


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b). Raises on zero-norm input rather than guessing."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors must have the same length")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def nir_filter(predictions: list, threshold: float = NIR_CLOUD_FLOOR) -> list:
    """Demote thick-cloud regions with mean NIR strictly below the floor."""
    out = []
    for p in predictions:
        if p.label == ClassLabel.THICK_CLOUD:
            if p.mean_nir is None:
                raise RefineError(f"region {p.region_id} has no mean NIR")
            if p.mean_nir < threshold:
                p = replace(p, label=ClassLabel.BUILDING, relabeled=True)
        out.append(p)
    return out


_RELABEL_SOURCES = (ClassLabel.CIRRUS_CLOUD, ClassLabel.BUILDING)


def relabel_ambiguous(predictions: list, graph, hops: int = 2,
                      aggregate: str = "min") -> list:
    """Pull cirrus/building regions back to thick cloud when their
    neighborhood says so.

    For each candidate region, distances are taken from its fused feature to
    thick-cloud neighbors and other-culture neighbors within `hops` hops,
    reduced by `aggregate` (min or mean). The region flips to thick cloud only
    when both groups are present and the thick side wins strictly. Labels are
    read once up front, so the pass order cannot influence the outcome.
    """
    if aggregate not in ("min", "mean"):
        raise ValueError("aggregate must be 'min' or 'mean'")
    reduce = np.min if aggregate == "min" else np.mean
    by_id = {p.region_id: p for p in predictions}
    before = {p.region_id: p.label for p in predictions}
    out = []
    for p in predictions:
        if before[p.region_id] not in _RELABEL_SOURCES:
            out.append(p)
            continue
        if p.feature is None:
            raise RefineError(f"region {p.region_id} carries no fused feature")
        d_thick = []
        d_other = []
        for nb in graph.neighbors_within(p.region_id, hops):
            q = by_id.get(nb)
            if q is None:
                continue
            if before[nb] == ClassLabel.THICK_CLOUD:
                d_thick.append(cosine_distance(p.feature, q.feature))
            elif before[nb] == ClassLabel.OTHER_CULTURE:
                d_other.append(cosine_distance(p.feature, q.feature))
        if d_thick and d_other and reduce(d_thick) < reduce(d_other):
            p = replace(p, label=ClassLabel.THICK_CLOUD, relabeled=True)
        out.append(p)
    return out


def refine(predictions: list, graph, nir_threshold: float = NIR_CLOUD_FLOOR,
           hops: int = 2, aggregate: str = "min") -> list:
    """NIR demotion first, then the neighborhood relabel pass."""
    return relabel_ambiguous(
        nir_filter(predictions, threshold=nir_threshold),
        graph, hops=hops, aggregate=aggregate,
    )


# ---------------------------------------------------------------------------
# mask rendering


@dataclass(frozen=True)
class CloudMask:
    width: int
    height: int
    mask: np.ndarray  # bool [H, W]

    def __post_init__(self):
        if self.mask.shape != (self.height, self.width) or self.mask.dtype != np.bool_:
            raise ValueError("mask must be a bool array of shape [height, width]")


def morphological_close(mask: np.ndarray) -> np.ndarray:
    """One 3x3 closing: dilation (outside treated as clear) then erosion
    (outside treated as set, so the result never loses original pixels)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=False)
    dil = np.zeros_like(mask)
    for di in range(3):
        for dj in range(3):
            dil |= padded[di : di + h, dj : dj + w]
    padded = np.pad(dil, 1, constant_values=True)
    out = np.ones_like(mask)
    for di in range(3):
        for dj in range(3):
            out &= padded[di : di + h, dj : dj + w]
    return out


def binary_mask(label_raster: np.ndarray, predictions: list,
                closing: bool = True) -> CloudMask:
    """Paint thick-cloud regions, then smooth with a single 3x3 closing."""
    by_id = {p.region_id: p for p in predictions}
    n_regions = int(label_raster.max()) + 1 if label_raster.size else 0
    cloudy = np.zeros(n_regions, dtype=bool)
    for rid in range(n_regions):
        p = by_id.get(rid)
        if p is not None and p.label == ClassLabel.THICK_CLOUD:
            cloudy[rid] = True
    mask = cloudy[label_raster]
    if closing:
        mask = morphological_close(mask)
    h, w = label_raster.shape
    return CloudMask(width=w, height=h, mask=mask)


def save_mask(cm: CloudMask, path: str | Path) -> None:
    arr = np.where(cm.mask, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def load_mask(path: str | Path) -> CloudMask:
    arr = np.asarray(Image.open(Path(path)).convert("L"))
    return CloudMask(width=arr.shape[1], height=arr.shape[0], mask=arr > 0)


# ---------------------------------------------------------------------------
# predictions file


def save_predictions(predictions: list, path: str | Path) -> None:
    """One JSON object per line, ordered by region id."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in sorted(predictions, key=lambda q: q.region_id):
            row = {
                "region_id": p.region_id,
                "class": int(p.label),
                "probs_cnn": [float(v) for v in p.probs_cnn],
                "probs_forest": [float(v) for v in p.probs_forest],
                "relabeled": bool(p.relabeled),
            }
            fh.write(json.dumps(row) + "\n")


def load_predictions(path: str | Path) -> list:
    out = []
    with open(Path(path), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out.append(
                RegionPrediction(
                    region_id=row["region_id"],
                    probs_cnn=np.asarray(row["probs_cnn"], dtype=np.float64),
                    probs_forest=np.asarray(row["probs_forest"], dtype=np.float64),
                    label=ClassLabel(row["class"]),
                    relabeled=row["relabeled"],
                )
            )
    return out
