"""Semi-supervised label propagation over a voxel affinity graph.

The graph links voxels of the region of interest through a local stencil
(6, 18 or 26 neighbors, or ``"full"`` for every pair, test scale only) with
Gaussian intensity affinities ``exp(-(I_x - I_y)^2 / sigma^2)``. The smoother
is ``S = D^-1/2 W D^-1/2`` and the refined map is the fixed point of

    L <- (1 - beta) S L + beta L0

which is the minimizer of ``L'(I - S)L + alpha |L - L0|^2`` for a matching
``alpha``. Before propagation the reliable background scores are rebalanced
against the reliable foreground count and both classes are mean-normalized.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import sparse

from .fusion import ProbMap
from .volume import BoundingBox, Volume

__all__ = [
    "PropagationConfig",
    "SimilarityGraph",
    "BalanceWarning",
    "gaussian_similarity",
    "build_graph",
    "balance_scores",
    "balance_weights",
    "propagate",
    "solve_direct",
    "refine",
]

log = logging.getLogger(__name__)

DENSE_LIMIT = 4000


class BalanceWarning(UserWarning):
    """No reliable background voxels, so background rebalancing was skipped."""


@dataclass(frozen=True)
class PropagationConfig:
    sigma: float = 10.0
    beta: float = 0.6
    T: float = 0.5
    stencil: Union[int, str] = 26
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.T < 1:
            raise ValueError("T must lie in (0, 1)")
        if self.stencil not in (6, 18, 26, "full"):
            raise ValueError("stencil must be 6, 18, 26 or 'full'")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    """Nodes are the box voxels in x-fastest order; matrices are CSR."""

    box: BoundingBox
    W: sparse.csr_matrix
    degree: np.ndarray
    S: sparse.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.W.shape[0]

    def node_ids(self) -> np.ndarray:
        """Full-volume ``(x, y, z)`` of every node, in node order."""
        nx, ny, nz = self.box.shape
        z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        ids = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        return ids + np.asarray(self.box.min_corner)


def gaussian_similarity(ix, iy, sigma: float, same_voxel: bool = False) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if same_voxel:
        return 0.0
    return float(np.exp(-((float(ix) - float(iy)) ** 2) / sigma ** 2))


def _offsets(stencil) -> list[tuple[int, int, int]]:
    """Half of the stencil (lexicographically positive offsets); edges are mirrored."""
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) <= (0, 0, 0):
                    continue
                nnz = abs(dx) + abs(dy) + abs(dz)
                if stencil == 6 and nnz > 1 or stencil == 18 and nnz > 2:
                    continue
                out.append((dx, dy, dz))
    return out


def _flat(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).ravel(order="F")


def build_graph(target: Volume, box: BoundingBox, cfg: PropagationConfig = PropagationConfig()) -> SimilarityGraph:
    box.check(target.dims)
    img = np.asarray(target.data[box.slices], dtype=np.float64)
    n = img.size
    nx, ny, nz = img.shape
    idx = np.arange(n).reshape(img.shape, order="F")
    sigma2 = cfg.sigma ** 2
    if cfg.stencil == "full":
        if n > DENSE_LIMIT:
            raise ValueError(f"full graphs are limited to {DENSE_LIMIT} nodes, box has {n}")
        v = _flat(img)
        dense = np.exp(-((v[:, None] - v[None, :]) ** 2) / sigma2)
        np.fill_diagonal(dense, 0.0)
        W = sparse.csr_matrix(dense)
    else:
        rows, cols, vals = [], [], []
        for dx, dy, dz in _offsets(cfg.stencil):
            src = (
                slice(max(0, -dx), nx - max(0, dx)),
                slice(max(0, -dy), ny - max(0, dy)),
                slice(max(0, -dz), nz - max(0, dz)),
            )
            dst = (
                slice(max(0, dx), nx - max(0, -dx)),
                slice(max(0, dy), ny - max(0, -dy)),
                slice(max(0, dz), nz - max(0, -dz)),
            )
            a = idx[src].ravel()
            b = idx[dst].ravel()
            w = np.exp(-((img[src] - img[dst]).ravel() ** 2) / sigma2)
            rows += [a, b]
            cols += [b, a]
            vals += [w, w]
        if rows:
            W = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
            )
        else:
            W = sparse.csr_matrix((n, n))
    W.sum_duplicates()
    W.sort_indices()
    degree = np.asarray(W.sum(axis=1)).ravel()
    inv = np.zeros(n)
    nz_deg = degree > 0
    inv[nz_deg] = 1.0 / np.sqrt(degree[nz_deg])
    Dm = sparse.diags(inv)
    S = (Dm @ W @ Dm).tocsr()
    S.sort_indices()
    return SimilarityGraph(box, W, degree, S)


def balance_scores(values, T: float):
    """Array form of :func:`balance_weights`.

    Returns ``(balanced, normalized, n_f, n_b, skipped)`` where ``balanced``
    holds the scores after background rebalancing and before normalization.
    """
    if not 0 < T < 1:
        raise ValueError("T must lie in (0, 1)")
    v = np.array(values, dtype=np.float64)
    fg = v > T
    bg = v < -T
    n_f = int(fg.sum())
    n_b = int(bg.sum())
    skipped = False
    if n_b > 0:
        v[bg] = -np.maximum((n_f / n_b) * np.abs(v[bg]), T)
    elif n_f > 0:
        skipped = True
        warnings.warn(
            f"no reliable background voxels (N_f={n_f}); balancing skipped", BalanceWarning, stacklevel=3
        )
    balanced = v.copy()
    pos = v > 0
    neg = v < 0
    if pos.any():
        v[pos] /= abs(v[pos].mean())
    if neg.any():
        v[neg] /= abs(v[neg].mean())
    return balanced, v, n_f, n_b, skipped


def balance_weights(p: ProbMap, T: float) -> ProbMap:
    """Rebalance reliable background scores, then normalize each class to mean magnitude 1.

    With ``N_f`` voxels above ``T`` and ``N_b`` below ``-T``, every reliable
    background score becomes ``-max(N_f / N_b * |P_b|, T)``. Afterwards
    positive scores are divided by their mean and negative scores by the
    magnitude of theirs. Zeros stay zero. Without reliable background the
    rebalancing is skipped with a :class:`BalanceWarning`.
    """
    _, v, n_f, n_b, skipped = balance_scores(p.values, T)
    return p.with_values(v, n_reliable_fg=n_f, n_reliable_bg=n_b, balance_skipped=skipped)


def _vector(l0, n: int) -> np.ndarray:
    v = l0.values if isinstance(l0, ProbMap) else l0
    v = np.asarray(v, dtype=np.float64)
    flat = _flat(v) if v.ndim == 3 else v.ravel()
    if flat.shape[0] != n:
        raise ValueError(f"map has {flat.shape[0]} voxels, graph has {n} nodes")
    return flat


def _as_map(l0, flat: np.ndarray, graph: SimilarityGraph, **info):
    if isinstance(l0, ProbMap):
        return l0.with_values(flat.reshape(graph.box.shape, order="F"), **info)
    return flat.reshape(np.shape(l0))


def propagate(l0, graph: SimilarityGraph, cfg: PropagationConfig = PropagationConfig(), history=None):
    """Iterate ``L <- (1 - beta) S L + beta L0`` from ``L = L0``.

    Stops when the largest absolute update drops below ``cfg.tol`` or after
    ``cfg.max_iters`` sweeps. Accepts a :class:`ProbMap` (returned with
    ``info['iterations']``) or a plain node vector. If ``history`` is a list,
    every iterate is appended to it.
    """
    n = graph.n_nodes
    base = _vector(l0, n)
    b = cfg.beta * base
    S = graph.S
    L = base.copy()
    it = 0
    delta = np.inf
    while it < cfg.max_iters:
        nxt = (1.0 - cfg.beta) * (S @ L) + b
        delta = float(np.max(np.abs(nxt - L))) if n else 0.0
        L = nxt
        it += 1
        if history is not None:
            history.append(L.copy())
        if delta < cfg.tol:
            break
    log.debug("propagation stopped after %d iterations (last update %.3g)", it, delta)
    return _as_map(l0, L, graph, iterations=it, last_update=delta)


def solve_direct(l0, graph: SimilarityGraph, beta: float):
    """Dense solve of ``(I - (1 - beta) S) L = beta L0``; small graphs only."""
    n = graph.n_nodes
    if n > DENSE_LIMIT:
        raise ValueError(f"direct solve is limited to {DENSE_LIMIT} nodes, graph has {n}")
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    base = _vector(l0, n)
    A = np.eye(n) - (1.0 - beta) * graph.S.toarray()
    L = np.linalg.solve(A, beta * base)
    return _as_map(l0, L, graph)


def refine(l0: ProbMap, target: Volume, cfg: PropagationConfig = PropagationConfig()) -> ProbMap:
    """Balance, build the graph over ``l0.box`` and propagate; ``decided`` is carried over."""
    balanced = balance_weights(l0, cfg.T)
    graph = build_graph(target, l0.box, cfg)
    return propagate(balanced, graph, cfg)
