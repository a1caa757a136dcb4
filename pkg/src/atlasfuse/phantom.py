"""Synthetic ellipsoid phantoms with pre-aligned, smoothly warped atlases.

The generator stands in for a registered atlas cohort: every atlas is the
ground-truth shape and its clean image pushed through an independent smooth
random displacement field, so the residual misalignment mimics what a
nonrigid registration leaves behind.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Atlas, Kind, Volume, write_atlas_dir, write_volume

__all__ = ["PhantomSpec", "Phantom", "generate_phantom", "write_phantom", "random_displacement"]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (40, 40, 40)
    center: tuple[float, float, float] | None = None  # default: volume center
    semi_axes: tuple[float, float, float] = (12.0, 6.0, 7.0)
    fg_intensity: float = 100.0
    bg_intensity: float = 40.0
    noise_sigma: float = 8.0
    n_atlases: int = 20
    warp_amp: float = 2.0
    warp_smooth: float = 4.0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "semi_axes", "spacing_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be 3 positive integers")
        if self.n_atlases < 1:
            raise ValueError("n_atlases must be >= 1")
        if self.noise_sigma < 0 or self.warp_amp < 0 or self.warp_smooth < 0:
            raise ValueError("noise_sigma, warp_amp and warp_smooth must be non-negative")
        margin = self.warp_amp + 2
        for c, a, n in zip(self.shape_center, self.semi_axes, self.dims):
            if c - a < margin or c + a > n - 1 - margin:
                raise ValueError(
                    f"ellipsoid (center {self.shape_center}, semi-axes {self.semi_axes}) does not fit "
                    f"in dims {self.dims} with margin {margin}"
                )

    @property
    def shape_center(self) -> tuple[float, float, float]:
        if self.center is not None:
            return self.center
        return tuple((n - 1) / 2.0 for n in self.dims)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class Phantom:
    target: Volume
    truth: Volume
    atlases: list
    spec: PhantomSpec


def ellipsoid_mask(spec: PhantomSpec) -> np.ndarray:
    grid = np.indices(spec.dims, dtype=np.float64)
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, spec.shape_center, spec.semi_axes))
    return r2 <= 1.0


def random_displacement(dims, amp: float, smooth: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field of shape ``(3, *dims)`` with norm at most ``amp``.

    I.i.d. Gaussian vectors are smoothed (periodic boundary, so the field is
    stationary), scaled to an RMS norm of ``amp / 2`` and clipped radially at ``amp``.
    """
    field = rng.standard_normal((3, *dims))
    if smooth > 0:
        field = np.stack([ndimage.gaussian_filter(c, smooth, mode="wrap") for c in field])
    norm = np.sqrt((field ** 2).sum(axis=0))
    rms = np.sqrt(np.mean(norm ** 2))
    if amp == 0 or rms == 0:
        return np.zeros_like(field)
    field *= 0.5 * amp / rms
    norm *= 0.5 * amp / rms
    scale = np.minimum(1.0, amp / np.maximum(norm, 1e-300))
    return field * scale


def _warp(image: np.ndarray, disp: np.ndarray, order: int) -> np.ndarray:
    coords = np.indices(image.shape, dtype=np.float64) + disp
    return ndimage.map_coordinates(image, coords, order=order, mode="nearest")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    truth = ellipsoid_mask(spec)
    clean = np.where(truth, spec.fg_intensity, spec.bg_intensity).astype(np.float64)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_atlases + 1)
    rng = np.random.default_rng(streams[0])
    target = clean + spec.noise_sigma * rng.standard_normal(spec.dims)
    atlases = []
    for stream in streams[1:]:
        rng = np.random.default_rng(stream)
        disp = random_displacement(spec.dims, spec.warp_amp, spec.warp_smooth, rng)
        assert np.sqrt((disp ** 2).sum(axis=0)).max() <= spec.warp_amp * (1 + 1e-12)
        lbl = _warp(truth.astype(np.float64), disp, order=0) > 0.5
        img = _warp(clean, disp, order=1) + spec.noise_sigma * rng.standard_normal(spec.dims)
        atlases.append(
            Atlas(Volume(img, spec.spacing_mm), Volume(lbl.astype(np.uint8), spec.spacing_mm, Kind.LABEL))
        )
    return Phantom(
        Volume(target, spec.spacing_mm),
        Volume(truth.astype(np.uint8), spec.spacing_mm, Kind.LABEL),
        atlases,
        spec,
    )


def write_phantom(phantom: Phantom, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(phantom.target, d / "target")
    write_volume(phantom.truth, d / "truth")
    write_atlas_dir(d, phantom.atlases)
    (d / "spec.json").write_text(json.dumps(phantom.spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return d
