"""End-to-end segmentation runs and phantom batch experiments."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import FusionConfig, ProbMap, candidate_voxels, fuse_rf, majority_vote
from .metrics import evaluate, rank_atlases
from .propagation import PropagationConfig, refine
from .volume import Atlas, BoundingBox, Kind, Volume, bounding_box_from_labels, check_atlases

__all__ = [
    "Mode",
    "RunConfig",
    "EvalMeta",
    "ConfigError",
    "load_config",
    "segment",
    "segment_modes",
    "embed",
    "batch_experiment",
    "summarize",
]

log = logging.getLogger(__name__)


class Mode(str, Enum):
    MV = "mv"
    MV_SSLP = "mv-sslp"
    LLL_RF = "lll-rf"
    RF_SSLP = "rf-sslp"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_atlases_selected: int = 20
    margin: int = 10
    fusion: FusionConfig = FusionConfig()
    propagation: PropagationConfig = PropagationConfig()
    seed: int = 0
    mode: Mode = Mode.RF_SSLP

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.n_atlases_selected < 1:
            raise ValueError("n_atlases_selected must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path=""):
    """Instantiate a config dataclass from nested dicts, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{path}{name}.")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_config(source) -> RunConfig:
    """RunConfig from a dict, a JSON string path, or ``None`` (defaults)."""
    if source is None:
        return RunConfig()
    if isinstance(source, dict):
        return _build(RunConfig, source)
    try:
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from exc
    return _build(RunConfig, data)


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides such as ``{"fusion.k": 200}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config path {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path {key!r}")
        node[parts[-1]] = value
    return _build(RunConfig, data)


@dataclass
class EvalMeta:
    selected_atlases: list
    box: BoundingBox
    n_candidates: int = 0
    iterations: int = 0
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selected_atlases": list(self.selected_atlases),
            "box": {"min_corner": list(self.box.min_corner), "max_corner": list(self.box.max_corner)},
            "n_candidates": self.n_candidates,
            "iterations": self.iterations,
            "timings_s": dict(self.timings),
            "info": {k: v for k, v in self.info.items() if isinstance(v, (int, float, bool, str))},
        }


def embed(p: ProbMap, dims, fill: float = -1.0) -> np.ndarray:
    """Full-volume array with the map's values inside its box and ``fill`` elsewhere."""
    out = np.full(dims, fill, dtype=np.float64)
    out[p.box.slices] = p.values
    return out


def _prepare(target: Volume, atlases: Sequence[Atlas], cfg: RunConfig):
    check_atlases(target, atlases)
    box = bounding_box_from_labels([a.label for a in atlases], cfg.margin)
    n_sel = min(cfg.n_atlases_selected, len(atlases))
    selected = rank_atlases(target, atlases, box, n_sel)
    chosen = [atlases[i] for i in selected]
    mv = majority_vote([a.label for a in chosen], box)
    return box, selected, chosen, mv


def segment_modes(
    target: Volume, atlases: Sequence[Atlas], cfg: RunConfig, modes: Iterable = tuple(Mode)
) -> dict:
    """Run several modes sharing atlas selection, voting and forest fusion.

    Returns ``{mode: (mask, probmap, meta)}`` with full-volume masks.
    """
    modes = [Mode(m) for m in modes]
    t0 = time.perf_counter()
    box, selected, chosen, mv = _prepare(target, atlases, cfg)
    timings = {"select_vote": time.perf_counter() - t0}
    fusion = dataclasses.replace(
        cfg.fusion, forest=dataclasses.replace(cfg.fusion.forest, seed=cfg.seed)
    )
    cands = candidate_voxels(mv)
    rf = None
    if Mode.LLL_RF in modes or Mode.RF_SSLP in modes:
        t = time.perf_counter()
        rf = fuse_rf(target, chosen, cands, mv, fusion)
        timings["fuse_rf"] = time.perf_counter() - t
    results = {}
    for mode in modes:
        t = time.perf_counter()
        if mode is Mode.MV:
            final = mv
        elif mode is Mode.LLL_RF:
            final = rf
        else:
            final = refine(mv if mode is Mode.MV_SSLP else rf, target, cfg.propagation)
        # outside the box every atlas votes background
        values = embed(final, target.dims, fill=-1.0)
        mask = Volume((values > 0).astype(np.uint8), target.spacing_mm, Kind.LABEL)
        meta = EvalMeta(
            selected_atlases=selected,
            box=box,
            n_candidates=int(cands.shape[0]),
            iterations=int(final.info.get("iterations", 0)),
            timings={**timings, mode.value: time.perf_counter() - t},
            info=dict(final.info),
        )
        results[mode] = (mask, final, meta)
    return results


def segment(target: Volume, atlases: Sequence[Atlas], cfg: RunConfig = RunConfig()):
    """Segment ``target`` in ``cfg.mode``; returns ``(mask, probmap, meta)``."""
    return segment_modes(target, atlases, cfg, [cfg.mode])[cfg.mode]


def batch_experiment(phantoms, cfg: RunConfig, modes: Iterable = tuple(Mode)) -> list[dict]:
    """Evaluate every mode on every phantom; one row per (phantom, mode)."""
    rows = []
    modes = [Mode(m) for m in modes]
    for i, ph in enumerate(phantoms):
        results = segment_modes(ph.target, ph.atlases, cfg, modes)
        for mode, (mask, _, meta) in results.items():
            rep = evaluate(mask, ph.truth)
            rows.append(
                {
                    "phantom": i,
                    "mode": mode.value,
                    "dice": rep.dice,
                    "mean_distance_mm": rep.mean_distance_mm,
                    "n_candidates": meta.n_candidates,
                }
            )
        log.info("phantom %d done", i)
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    """Mean and std of Dice and MD per mode."""
    out = {}
    for mode in dict.fromkeys(r["mode"] for r in rows):
        sel = [r for r in rows if r["mode"] == mode]
        d = np.array([r["dice"] for r in sel])
        md = np.array([r["mean_distance_mm"] for r in sel if r["mean_distance_mm"] is not None])
        out[mode] = {
            "n": len(sel),
            "dice_mean": float(d.mean()),
            "dice_std": float(d.std()),
            "md_mean": float(md.mean()) if md.size else float("nan"),
            "md_std": float(md.std()) if md.size else float("nan"),
        }
    return out


def grid_configs(grid: dict, base: RunConfig) -> list[tuple[dict, RunConfig]]:
    """Cartesian product of a ``{"dotted.path": [values...]}`` grid applied to ``base``."""
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        out.append((params, with_overrides(base, params)))
    return out
