"""Overlap, surface-distance and similarity metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import Atlas, BoundingBox, Volume, crop

__all__ = [
    "EvalReport",
    "dice",
    "boundary_mask",
    "mean_distance",
    "nmi",
    "rank_atlases",
    "evaluate",
]


@dataclass(frozen=True)
class EvalReport:
    dice: float
    mean_distance_mm: float | None  # None when exactly one mask is empty
    n_pred: int
    n_truth: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _masks(pred: Volume, truth: Volume) -> tuple[np.ndarray, np.ndarray]:
    if pred.dims != truth.dims:
        raise ValueError(f"mask dims differ: {pred.dims} vs {truth.dims}")
    return pred.data.astype(bool), truth.data.astype(bool)


def dice(pred: Volume, truth: Volume) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a, b = _masks(pred, truth)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbor; outside the volume is background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, _SIX, border_value=0)


def _surface_mean(src: np.ndarray, dst: np.ndarray) -> float:
    # a few nearest candidates from the k-d tree, distances recomputed from coordinates
    k = min(8, dst.shape[0])
    _, nearest = cKDTree(dst).query(src, k=k)
    nearest = nearest.reshape(src.shape[0], k)
    diff = src[:, None, :] - dst[nearest]
    return float(np.mean(np.min(np.sqrt(np.sum(diff * diff, axis=2)), axis=1)))


def mean_distance(pred: Volume, truth: Volume) -> float:
    """Symmetric mean surface distance in mm.

    Mean over the boundary voxels of each mask of the distance to the nearest
    boundary voxel of the other, averaged over both directions.
    """
    a, b = _masks(pred, truth)
    if pred.spacing_mm != truth.spacing_mm:
        raise ValueError("masks must share voxel spacing")
    if not a.any() or not b.any():
        raise ValueError("mean distance needs two non-empty masks")
    spacing = np.asarray(pred.spacing_mm)
    pa = np.argwhere(boundary_mask(a)) * spacing
    pb = np.argwhere(boundary_mask(b)) * spacing
    return 0.5 * (_surface_mean(pa, pb) + _surface_mean(pb, pa))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _bin(values: np.ndarray, bins: int) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def nmi(a: Volume, b: Volume, bins: int = 64) -> float:
    """``(H(A) + H(B)) / H(A, B)`` over equal-width bins spanning each image's range.

    Two constant images give ``H(A, B) = 0``; that case returns 2.0 (perfect
    agreement) instead of NaN.
    """
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ia = _bin(np.asarray(a.data, dtype=np.float64).ravel(), bins)
    ib = _bin(np.asarray(b.data, dtype=np.float64).ravel(), bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    h_ab = _entropy(joint.ravel())
    if h_ab == 0.0:
        return 2.0
    return (_entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0))) / h_ab


def rank_atlases(
    target: Volume, atlases: Sequence[Atlas], box: BoundingBox, n: int, bins: int = 64
) -> list[int]:
    """Indices of the ``n`` atlases most similar to ``target`` within ``box`` (NMI, descending)."""
    if not 1 <= n <= len(atlases):
        raise ValueError(f"n must lie in [1, {len(atlases)}], got {n}")
    t = crop(target, box)
    scores = [nmi(t, crop(a.image, box), bins) for a in atlases]
    order = sorted(range(len(atlases)), key=lambda i: (-scores[i], i))
    return order[:n]


def evaluate(pred: Volume, truth: Volume) -> EvalReport:
    a, b = _masks(pred, truth)
    if a.any() and b.any():
        md = mean_distance(pred, truth)
    elif not a.any() and not b.any():
        md = 0.0
    else:
        md = None
    return EvalReport(dice(pred, truth), md, int(a.sum()), int(b.sum()))
