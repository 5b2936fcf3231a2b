"""Volumetric overlap and surface-distance metrics.

Dice / Jaccard are reported in percent; ASD and HD95 in voxel units with unit
isotropic spacing. Surfaces are mask voxels with at least one face neighbor
(6-connectivity) outside the mask, with the array border counting as outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume_io import LabelVolume


@dataclass
class ClassMetrics:
    cls: int
    dice: float          # percent
    jaccard: float       # percent
    asd: float           # voxels, NaN when undefined
    hd95: float          # voxels, NaN when undefined
    pred_empty: bool
    gt_empty: bool
    distances_defined: bool


@dataclass
class MetricsRecord:
    per_class: dict[int, ClassMetrics]

    @property
    def mean_dice(self) -> float:
        return float(np.mean([c.dice for c in self.per_class.values()]))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean([c.jaccard for c in self.per_class.values()]))

    @property
    def mean_asd(self) -> float:
        vals = [c.asd for c in self.per_class.values() if c.distances_defined]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_hd95(self) -> float:
        vals = [c.hd95 for c in self.per_class.values() if c.distances_defined]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "mean": {
                "dice": self.mean_dice,
                "jaccard": self.mean_jaccard,
                "asd": self.mean_asd,
                "hd95": self.mean_hd95,
            },
            "per_class": {
                str(c.cls): {
                    "dice": c.dice,
                    "jaccard": c.jaccard,
                    "asd": c.asd,
                    "hd95": c.hd95,
                    "pred_empty": c.pred_empty,
                    "gt_empty": c.gt_empty,
                    "distances_defined": c.distances_defined,
                }
                for c in self.per_class.values()
            },
        }


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n, 3) of mask voxels with a face neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surf = mask & ~interior
    return np.argwhere(surf)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each src surface voxel to the nearest dst voxel."""
    tree = cKDTree(dst.astype(np.float64))
    dist, _ = tree.query(src.astype(np.float64), k=1)
    return np.atleast_1d(dist)


def _nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    values = np.sort(values)
    k = max(1, math.ceil(q / 100.0 * len(values)))
    return float(values[k - 1])


def _binary_metrics(pred: np.ndarray, gt: np.ndarray, cls: int) -> ClassMetrics:
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    if n_pred == 0 and n_gt == 0:
        return ClassMetrics(cls, 100.0, 100.0, 0.0, 0.0, True, True, True)
    if n_pred == 0 or n_gt == 0:
        return ClassMetrics(
            cls, 0.0, 0.0, float("nan"), float("nan"), n_pred == 0, n_gt == 0, False
        )
    inter = int((pred & gt).sum())
    union = n_pred + n_gt - inter
    dice = 2.0 * inter / (n_pred + n_gt)
    jaccard = inter / union

    surf_p = surface_voxels(pred)
    surf_g = surface_voxels(gt)
    d_pg = _directed_distances(surf_p, surf_g)
    d_gp = _directed_distances(surf_g, surf_p)
    asd = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    hd95 = max(
        _nearest_rank_percentile(d_pg, 95.0), _nearest_rank_percentile(d_gp, 95.0)
    )
    return ClassMetrics(cls, 100.0 * dice, 100.0 * jaccard, asd, hd95, False, False, True)


def evaluate(pred: LabelVolume, gt: LabelVolume) -> MetricsRecord:
    """Per-foreground-class Dice/Jaccard/ASD/HD95 of pred against gt."""
    if pred.dims != gt.dims:
        raise ValueError(f"dim mismatch: pred {pred.dims} vs gt {gt.dims}")
    if pred.num_classes != gt.num_classes:
        raise ValueError(
            f"class-count mismatch: pred K={pred.num_classes} vs gt K={gt.num_classes}"
        )
    per_class = {}
    for cls in range(1, gt.num_classes):
        per_class[cls] = _binary_metrics(pred.data == cls, gt.data == cls, cls)
    return MetricsRecord(per_class=per_class)
