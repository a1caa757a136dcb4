"""Patch extraction, patch features and balanced training-sample selection.

Patches are flattened in x-fastest scan order, matching the on-disk layout.
Positions outside the volume read as 0.

Two feature modes are available:

``intensity``
    the z-normalized patch intensities (an all-constant patch maps to zeros).
``texture``
    the z-normalized intensities, followed by the gradient magnitude at each
    patch voxel (central differences, one-sided on the patch faces), followed
    by mean, standard deviation, minimum and maximum of the raw patch.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .volume import Volume

__all__ = [
    "FeatureMode",
    "PatchConfig",
    "TrainingSample",
    "Selection",
    "OneClassError",
    "feature_length",
    "extract_patch",
    "compute_features",
    "patch_distance",
    "select_balanced_samples",
]


class FeatureMode(str, Enum):
    INTENSITY = "intensity"
    TEXTURE = "texture"


MODE_CODES = {FeatureMode.INTENSITY: 0, FeatureMode.TEXTURE: 1}


@dataclass(frozen=True)
class PatchConfig:
    patch_radius: int = 3
    neighborhood_radius: int = 1
    feature_mode: FeatureMode = FeatureMode.TEXTURE

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.neighborhood_radius < 0:
            raise ValueError("neighborhood_radius must be >= 0")

    @property
    def patch_side(self) -> int:
        return 2 * self.patch_radius + 1

    @property
    def patch_size(self) -> int:
        return self.patch_side ** 3

    @property
    def neighborhood_size(self) -> int:
        return (2 * self.neighborhood_radius + 1) ** 3


def feature_length(cfg: PatchConfig) -> int:
    n = cfg.patch_size
    if cfg.feature_mode is FeatureMode.INTENSITY:
        return n
    return 2 * n + 4


class OneClassError(ValueError):
    """A balanced selection was requested but one label class has no members."""


@dataclass(frozen=True)
class TrainingSample:
    features: np.ndarray
    label: int
    source: tuple[int, int]  # (atlas index, x-fastest voxel index)
    patch: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError(f"sample label must be +1 or -1, got {self.label}")


class Selection(NamedTuple):
    samples: list
    positive_shortfall: int
    negative_shortfall: int

    @property
    def short(self) -> bool:
        return self.positive_shortfall > 0 or self.negative_shortfall > 0


# --- compiled kernels -------------------------------------------------------


@njit(cache=True)
def patch_into(padded, x, y, z, side, out):
    """Copy the cube of edge ``side`` whose low corner is ``(x, y, z)`` in ``padded``."""
    k = 0
    for dz in range(side):
        for dy in range(side):
            for dx in range(side):
                out[k] = padded[x + dx, y + dy, z + dz]
                k += 1


@njit(cache=True)
def features_into(patch, side, mode, out):
    n = side * side * side
    lo = patch[0]
    hi = patch[0]
    total = 0.0
    for i in range(n):
        v = patch[i]
        total += v
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    mean = total / n
    ss = 0.0
    for i in range(n):
        d = patch[i] - mean
        ss += d * d
    std = np.sqrt(ss / n)
    if hi == lo or std == 0.0:
        for i in range(n):
            out[i] = 0.0
    else:
        for i in range(n):
            out[i] = (patch[i] - mean) / std
    if mode == 0:
        return
    plane = side * side
    k = n
    for z in range(side):
        for y in range(side):
            for x in range(side):
                c = x + side * y + plane * z
                g = 0.0
                for axis in range(3):
                    if axis == 0:
                        pos, stride = x, 1
                    elif axis == 1:
                        pos, stride = y, side
                    else:
                        pos, stride = z, plane
                    if side == 1:
                        d = 0.0
                    elif pos == 0:
                        d = patch[c + stride] - patch[c]
                    elif pos == side - 1:
                        d = patch[c] - patch[c - stride]
                    else:
                        d = 0.5 * (patch[c + stride] - patch[c - stride])
                    g += d * d
                out[k] = np.sqrt(g)
                k += 1
    if hi == lo:
        mean = lo
        std = 0.0
    out[k] = mean
    out[k + 1] = std
    out[k + 2] = lo
    out[k + 3] = hi


@njit(cache=True)
def ssd(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        d = a[i] - b[i]
        s += d * d
    return s


@njit(cache=True)
def balanced_order(dist, labels, k):
    """Indices of the ``k`` nearest positives and ``k`` nearest negatives.

    Ties in ``dist`` keep input order (stable sort), so callers order their
    candidates by (atlas index, voxel scan order) to get that tie-break.
    """
    order = np.argsort(dist, kind="mergesort")
    pos = np.empty(k, dtype=np.int64)
    neg = np.empty(k, dtype=np.int64)
    n_pos = 0
    n_neg = 0
    for i in order:
        if labels[i] > 0:
            if n_pos < k:
                pos[n_pos] = i
                n_pos += 1
        elif n_neg < k:
            neg[n_neg] = i
            n_neg += 1
        if n_pos == k and n_neg == k:
            break
    return pos[:n_pos], neg[:n_neg]


# --- python API -------------------------------------------------------------


def extract_patch(v: Volume, center, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    p = cfg.patch_radius
    padded = np.pad(np.asarray(v.data, dtype=np.float64), p)
    x, y, z = (int(c) for c in center)
    nx, ny, nz = v.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        # center outside the volume; only overlapping positions are nonzero
        out = np.zeros(cfg.patch_size)
        for k, (dx, dy, dz) in enumerate(_offsets(p)):
            xx, yy, zz = x + dx, y + dy, z + dz
            if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                out[k] = v.data[xx, yy, zz]
        return out
    out = np.empty(cfg.patch_size)
    patch_into(padded, x, y, z, cfg.patch_side, out)
    return out


def _offsets(radius):
    r = range(-radius, radius + 1)
    return [(dx, dy, dz) for dz in r for dy in r for dx in r]


def compute_features(patch, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    patch = np.ascontiguousarray(patch, dtype=np.float64)
    if patch.shape != (cfg.patch_size,):
        raise ValueError(f"patch length {patch.shape} does not match config ({cfg.patch_size})")
    out = np.empty(feature_length(cfg))
    features_into(patch, cfg.patch_side, MODE_CODES[cfg.feature_mode], out)
    return out


def patch_distance(a, b) -> float:
    """Sum of squared differences between two raw patches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"patch lengths differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def select_balanced_samples(
    candidates: Sequence[TrainingSample], target_patch, k: int
) -> Selection:
    """Pick the ``k`` most similar positive and negative samples.

    Similarity is :func:`patch_distance` between each sample's raw patch and
    ``target_patch``; ties go to the lower atlas index, then lower voxel index.
    A class with fewer than ``k`` members contributes all of them and the gap
    is reported in the returned :class:`Selection`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    target = np.asarray(target_patch, dtype=np.float64)
    ranked = sorted(
        range(len(candidates)),
        key=lambda i: (
            patch_distance(candidates[i].patch, target),
            candidates[i].source[0],
            candidates[i].source[1],
        ),
    )
    pos = [candidates[i] for i in ranked if candidates[i].label > 0][:k]
    neg = [candidates[i] for i in ranked if candidates[i].label < 0][:k]
    if not pos or not neg:
        missing = "positive" if not pos else "negative"
        raise OneClassError(f"no {missing} samples among {len(candidates)} candidates")
    return Selection(pos + neg, k - len(pos), k - len(neg))
