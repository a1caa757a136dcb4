"""Label fusion: majority voting and local random-forest regression.

Probabilistic maps use the signed convention: +1 is foreground, -1 is
background, and the magnitude is the confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit, prange

from ._rng import as_seed, mix_seed
from .features import MODE_CODES, PatchConfig, balanced_order, feature_length, features_into, patch_into, ssd
from .forest import ForestConfig, forest_fit_predict
from .volume import Atlas, BoundingBox, Kind, Volume

__all__ = [
    "ProbMap",
    "FusionConfig",
    "majority_vote",
    "candidate_voxels",
    "fuse_rf",
    "binarize",
    "voxel_seed",
]


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Signed per-voxel scores over ``box``; arrays have shape ``box.shape``."""

    box: BoundingBox
    values: np.ndarray
    decided: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        decided = np.asarray(self.decided, dtype=bool)
        if values.shape != self.box.shape or decided.shape != self.box.shape:
            raise ValueError(f"map arrays must have the box shape {self.box.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "decided", decided)

    def with_values(self, values, **info) -> "ProbMap":
        return replace(self, values=np.asarray(values, dtype=np.float64), info={**self.info, **info})


@dataclass(frozen=True)
class FusionConfig:
    k: int = 100
    patch: PatchConfig = PatchConfig()
    forest: ForestConfig = ForestConfig()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def majority_vote(atlas_labels: Sequence[Volume], box: BoundingBox) -> ProbMap:
    """Vote fraction ``(n_fg - n_bg) / N`` per voxel; unanimous voxels are marked decided."""
    if not atlas_labels:
        raise ValueError("need at least one atlas label")
    dims = atlas_labels[0].dims
    box.check(dims)
    n_fg = np.zeros(box.shape, dtype=np.int64)
    for lab in atlas_labels:
        if lab.dims != dims:
            raise ValueError("atlas labels must share dims")
        n_fg += lab.data[box.slices]
    n = len(atlas_labels)
    values = (n_fg - (n - n_fg)) / n
    return ProbMap(box, values, np.abs(values) == 1.0, atlas_labels[0].spacing_mm)


def candidate_voxels(mv: ProbMap) -> np.ndarray:
    """Undecided voxels (``|value| < 1``) as full-volume ``(x, y, z)`` rows in x-fastest scan order."""
    local = np.argwhere((np.abs(mv.values) < 1.0).transpose(2, 1, 0))[:, ::-1]
    return local + np.asarray(mv.box.min_corner, dtype=np.int64)


def voxel_seed(seed: int, index, dims) -> int:
    """Per-voxel forest seed, a function of the global seed and the voxel's linear index only."""
    x, y, z = index
    lin = int(x) + dims[0] * (int(y) + dims[1] * int(z))
    return int(mix_seed(np.uint64(as_seed(seed)), lin))


@njit(parallel=True, cache=True)
def _fuse_kernel(
    target, images, labels, cand, dims, pr, nr, mode, n_feat,
    k, n_tree, n_split, min_leaf, max_depth, seed, bootstrap, out, status,
):
    side = 2 * pr + 1
    ps = side * side * side
    nb = 2 * nr + 1
    n_atlas = images.shape[0]
    for c in prange(cand.shape[0]):
        x = cand[c, 0]
        y = cand[c, 1]
        z = cand[c, 2]
        n_max = n_atlas * nb * nb * nb
        patches = np.empty((n_max, ps))
        labs = np.empty(n_max)
        dist = np.empty(n_max)
        tpatch = np.empty(ps)
        patch_into(target, x + nr, y + nr, z + nr, side, tpatch)
        n = 0
        n_pos = 0
        for i in range(n_atlas):
            for dz in range(-nr, nr + 1):
                for dy in range(-nr, nr + 1):
                    for dx in range(-nr, nr + 1):
                        jx = x + dx
                        jy = y + dy
                        jz = z + dz
                        if jx < 0 or jy < 0 or jz < 0 or jx >= dims[0] or jy >= dims[1] or jz >= dims[2]:
                            continue
                        patch_into(images[i], jx + nr, jy + nr, jz + nr, side, patches[n])
                        lab = labels[i, jx, jy, jz]
                        labs[n] = lab
                        if lab > 0:
                            n_pos += 1
                        dist[n] = ssd(patches[n], tpatch)
                        n += 1
        if n_pos == 0:
            out[c] = -1.0
            status[c] = 1
            continue
        if n_pos == n:
            out[c] = 1.0
            status[c] = 1
            continue
        pos, neg = balanced_order(dist[:n], labs[:n], k)
        m = pos.shape[0] + neg.shape[0]
        X = np.empty((m, n_feat))
        yv = np.empty(m)
        for s in range(pos.shape[0]):
            features_into(patches[pos[s]], side, mode, X[s])
            yv[s] = 1.0
        for s in range(neg.shape[0]):
            features_into(patches[neg[s]], side, mode, X[pos.shape[0] + s])
            yv[pos.shape[0] + s] = -1.0
        xq = np.empty(n_feat)
        features_into(tpatch, side, mode, xq)
        lin = x + dims[0] * (y + dims[1] * z)
        v = forest_fit_predict(
            X, yv, xq, n_tree, n_split, min_leaf, max_depth, mix_seed(seed, lin), bootstrap
        )
        out[c] = min(1.0, max(-1.0, v))
        status[c] = 2 if m < 2 * k else 0


def _padded(data: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(np.asarray(data, dtype=np.float64), pad)


def fuse_rf(
    target: Volume,
    atlases: Sequence[Atlas],
    candidates,
    mv: ProbMap,
    cfg: FusionConfig = FusionConfig(),
) -> ProbMap:
    """Replace each candidate voxel's MV value with a local forest prediction.

    For candidate ``x`` every atlas voxel ``j`` in the ``(2r+1)^3`` neighborhood
    of ``x`` contributes its patch and its label; the ``k`` positives and ``k``
    negatives whose patches are closest to the target patch at ``x`` train a
    forest seeded from ``(cfg.forest.seed, x)``, so results do not depend on
    processing order. When the neighborhood holds one label only, ``x`` takes
    that label's sign without training.

    ``info`` of the result reports ``n_fallback`` (one-class voxels) and
    ``n_short`` (voxels where a class had fewer than ``k`` samples).
    """
    if not atlases:
        raise ValueError("need at least one atlas")
    cand = np.ascontiguousarray(np.asarray(candidates, dtype=np.int64).reshape(-1, 3))
    for v in cand:
        if not mv.box.contains(v):
            raise ValueError(f"candidate voxel {tuple(v)} lies outside the map box")
    pc = cfg.patch
    fc = cfg.forest
    n_feat = feature_length(pc)
    if fc.n_split > n_feat:
        raise ValueError(f"n_split={fc.n_split} exceeds feature length {n_feat}")
    pad = pc.patch_radius + pc.neighborhood_radius
    tpad = _padded(target.data, pad)
    images = np.stack([_padded(a.image.data, pad) for a in atlases])
    labels = np.stack([a.label.data.astype(np.float64) * 2.0 - 1.0 for a in atlases])
    out = np.empty(cand.shape[0])
    status = np.zeros(cand.shape[0], dtype=np.int64)
    if cand.shape[0]:
        _fuse_kernel(
            tpad, images, labels, cand, np.array(target.dims, dtype=np.int64),
            pc.patch_radius, pc.neighborhood_radius, MODE_CODES[pc.feature_mode], n_feat,
            cfg.k, fc.n_tree, fc.n_split, fc.min_leaf, fc.depth_limit,
            np.uint64(as_seed(fc.seed)), fc.bootstrap, out, status,
        )
    values = mv.values.copy()
    local = cand - np.asarray(mv.box.min_corner)
    values[local[:, 0], local[:, 1], local[:, 2]] = out
    # decided voxels pass through untouched even if listed as candidates
    values[mv.decided] = mv.values[mv.decided]
    return mv.with_values(
        values,
        n_candidates=int(cand.shape[0]),
        n_fallback=int(np.sum(status == 1)),
        n_short=int(np.sum(status == 2)),
    )


def binarize(p: ProbMap, threshold: float = 0.0) -> Volume:
    """Label 1 where the score is strictly above ``threshold``; box-shaped."""
    return Volume((p.values > threshold).astype(np.uint8), p.spacing_mm, Kind.LABEL)
