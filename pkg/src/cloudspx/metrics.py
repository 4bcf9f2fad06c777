"""Super-pixel level evaluation of cloud detection.

Scores are computed over regions, not pixels: a region is predicted cloudy
when its final class is thick cloud, and counts as ground-truth cloudy when
strictly more than half of its pixels are cloud in the reference raster.
Cirrus counts as cloud in the reference by default. An NIR-threshold
baseline is included for comparison against the learned pipeline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patchset import ClassLabel

BASELINE_NIR_THRESHOLD = 1000.0


@dataclass(frozen=True)
class PrfScores:
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int


def prf_from_counts(tp: int, fp: int, fn: int) -> PrfScores:
    """P and R fall back to 1.0 only when there is nothing to find and
    nothing was claimed; a one-sided empty case scores 0.0."""
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0 if fp == 0 else 0.0
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f_measure = 0.0
    else:
        f_measure = 2.0 * precision * recall / (precision + recall)
    return PrfScores(precision, recall, f_measure, int(tp), int(fp), int(fn))


def superpixel_prf(predicted: np.ndarray, actual: np.ndarray) -> PrfScores:
    """Both inputs are per-region cloud flags aligned by region id."""
    predicted = np.asarray(predicted, dtype=bool)
    actual = np.asarray(actual, dtype=bool)
    if predicted.shape != actual.shape:
        raise ValueError("predicted and actual flag arrays differ in length")
    tp = int(np.count_nonzero(predicted & actual))
    fp = int(np.count_nonzero(predicted & ~actual))
    fn = int(np.count_nonzero(~predicted & actual))
    return prf_from_counts(tp, fp, fn)


def gt_cloud_pixels(classes: np.ndarray, cirrus_is_cloud: bool = True) -> np.ndarray:
    """Reference cloud mask from a per-pixel class raster."""
    cloud = classes == int(ClassLabel.THICK_CLOUD)
    if cirrus_is_cloud:
        cloud = cloud | (classes == int(ClassLabel.CIRRUS_CLOUD))
    return cloud


def pixel_mask_to_regions(label_raster: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Majority vote: region is cloudy iff cloud pixels * 2 > area (strict)."""
    if label_raster.shape != pixel_mask.shape:
        raise ValueError("label raster and pixel mask differ in shape")
    n = int(label_raster.max()) + 1 if label_raster.size else 0
    area = np.bincount(label_raster.ravel(), minlength=n)
    cloudy = np.bincount(
        label_raster.ravel(), weights=pixel_mask.ravel().astype(np.float64), minlength=n
    )
    return cloudy * 2 > area


def predicted_cloud_regions(predictions: list, n_regions: int) -> np.ndarray:
    """Per-region flags from refined predictions: cloud iff thick."""
    flags = np.zeros(n_regions, dtype=bool)
    for p in predictions:
        if p.region_id >= n_regions:
            raise ValueError(f"region id {p.region_id} outside raster range")
        flags[p.region_id] = p.label == ClassLabel.THICK_CLOUD
    return flags


def nir_baseline(mean_nir: np.ndarray,
                 threshold: float = BASELINE_NIR_THRESHOLD) -> np.ndarray:
    """Region is called cloudy when its mean NIR strictly exceeds the
    threshold. No learning involved; serves as the comparison floor."""
    return np.asarray(mean_nir, dtype=np.float64) > threshold


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    per_tile: dict
    micro_average: PrfScores


def build_report(per_tile_flags: dict) -> EvalReport:
    """per_tile_flags maps tile id to (predicted_flags, actual_flags).

    The micro average pools tp/fp/fn across tiles before scoring, so large
    tiles weigh more than small ones.
    """
    per_tile = {}
    tp = fp = fn = 0
    for tile_id in sorted(per_tile_flags):
        pred, actual = per_tile_flags[tile_id]
        scores = superpixel_prf(pred, actual)
        per_tile[tile_id] = scores
        tp += scores.tp
        fp += scores.fp
        fn += scores.fn
    return EvalReport(per_tile=per_tile, micro_average=prf_from_counts(tp, fp, fn))


def _scores_dict(s: PrfScores) -> dict:
    return {
        "precision": s.precision,
        "recall": s.recall,
        "f_measure": s.f_measure,
        "tp": s.tp,
        "fp": s.fp,
        "fn": s.fn,
    }


def save_report(report: EvalReport, path: str | Path,
                csv_path: str | Path | None = None) -> None:
    doc = {
        "per_tile": {tid: _scores_dict(s) for tid, s in report.per_tile.items()},
        "micro_average": _scores_dict(report.micro_average),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tile_id", "precision", "recall", "f_measure", "tp", "fp", "fn"])
            for tid in sorted(report.per_tile):
                s = report.per_tile[tid]
                writer.writerow([tid, f"{s.precision:.6f}", f"{s.recall:.6f}",
                                 f"{s.f_measure:.6f}", s.tp, s.fp, s.fn])
            m = report.micro_average
            writer.writerow(["micro_average", f"{m.precision:.6f}", f"{m.recall:.6f}",
                             f"{m.f_measure:.6f}", m.tp, m.fp, m.fn])


def load_report(path: str | Path) -> EvalReport:
    doc = json.loads(Path(path).read_text())
    per_tile = {
        tid: PrfScores(**vals) for tid, vals in doc["per_tile"].items()
    }
    return EvalReport(per_tile=per_tile, micro_average=PrfScores(**doc["micro_average"]))
