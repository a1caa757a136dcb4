"""Dense 3D volumes, bounding boxes and the MVOL file format.

Arrays are stored with shape ``(nx, ny, nz)`` and indexed ``[x, y, z]``.
On disk the data is written x-fastest (Fortran order), i.e. the linear
index of voxel ``(x, y, z)`` is ``x + nx * (y + ny * z)``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Kind",
    "Volume",
    "BoundingBox",
    "VolumeFormatError",
    "read_volume",
    "write_volume",
    "crop",
    "bounding_box_from_labels",
    "linear_index",
    "Atlas",
    "check_atlases",
    "read_atlas_dir",
    "write_atlas_dir",
]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed MVOL headers or data files."""


class Kind(str, Enum):
    INTENSITY = "intensity"
    LABEL = "label"


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid.

    ``data`` is converted to float32 for intensity volumes and uint8 for
    label volumes, and made read-only so volumes can be shared freely.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = Kind.INTENSITY

    def __post_init__(self):
        kind = Kind(self.kind)
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite values, got {self.spacing_mm}")
        if kind is Kind.LABEL:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("label volumes may only contain 0 and 1")
            data = data.astype(np.uint8)
        else:
            data = data.astype(np.float32)
        data = np.array(data, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "kind", kind)

    @classmethod
    def label(cls, data, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        return cls(np.asarray(data), spacing_mm, Kind.LABEL)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def is_label(self) -> bool:
        return self.kind is Kind.LABEL

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.spacing_mm == other.spacing_mm
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel box ``[min_corner, max_corner]``."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must have 3 components")
        if any(a < 0 for a in lo) or any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box {lo}..{hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(n) - 1 for n in dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_corner, self.max_corner))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(b < n for b, n in zip(self.max_corner, dims))

    def check(self, dims: Sequence[int]) -> None:
        if not self.fits(dims):
            raise ValueError(f"box {self.min_corner}..{self.max_corner} exceeds volume dims {tuple(dims)}")

    def contains(self, index: Sequence[int]) -> bool:
        return all(a <= i <= b for a, i, b in zip(self.min_corner, index, self.max_corner))


def linear_index(index, dims) -> int:
    """x-fastest linear index of a voxel."""
    x, y, z = index
    nx, ny, _ = dims
    return int(x) + int(nx) * (int(y) + int(ny) * int(z))


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def write_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``; a ``.json``/``.raw`` suffix on ``path`` is ignored."""
    header_path, raw_path = _paths(path)
    dtype = "u8" if v.is_label else "f32"
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dtype": dtype,
        "order": "x-fastest",
    }
    raw = v.data.astype(_DTYPES[dtype]).ravel(order="F").tobytes()
    header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    raw_path.write_bytes(raw)


def read_volume(path) -> Volume:
    header_path, raw_path = _paths(path)
    for p in (header_path, raw_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing volume file {p}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: invalid JSON ({exc})") from exc
    try:
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        dtype = header["dtype"]
        order = header.get("order", "x-fastest")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: bad header ({exc})") from exc
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unknown dtype {dtype!r}")
    if order != "x-fastest":
        raise VolumeFormatError(f"{header_path}: unsupported order {order!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{header_path}: dims must be 3 positive integers")
    raw = raw_path.read_bytes()
    n = int(np.prod(dims))
    itemsize = _DTYPES[dtype].itemsize
    if len(raw) != n * itemsize:
        raise VolumeFormatError(
            f"{raw_path}: expected {n} values ({n * itemsize} bytes), found {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(dims, order="F")
    if dtype == "u8":
        if not np.all(data <= 1):
            raise VolumeFormatError(f"{raw_path}: label data contains values outside {{0, 1}}")
        return Volume(data, tuple(spacing), Kind.LABEL)
    return Volume(data, tuple(spacing), Kind.INTENSITY)


def crop(v: Volume, box: BoundingBox) -> Volume:
    box.check(v.dims)
    return Volume(v.data[box.slices], v.spacing_mm, v.kind)


def bounding_box_from_labels(labels: Sequence[Volume], margin: int = 10) -> BoundingBox:
    """Smallest box holding every foreground voxel of every label, dilated by ``margin``."""
    if not labels:
        raise ValueError("need at least one label volume")
    dims = labels[0].dims
    union = np.zeros(dims, dtype=bool)
    for lab in labels:
        if lab.dims != dims:
            raise ValueError("label volumes must share dims")
        union |= lab.data.astype(bool)
    if not union.any():
        raise ValueError("no foreground voxels in any label volume")
    idx = np.nonzero(union)
    lo = [max(int(i.min()) - margin, 0) for i in idx]
    hi = [min(int(i.max()) + margin, n - 1) for i, n in zip(idx, dims)]
    return BoundingBox(tuple(lo), tuple(hi))


class Atlas(NamedTuple):
    image: Volume
    label: Volume


def check_atlases(target: Volume, atlases: Sequence[Atlas]) -> None:
    """Raise ``ValueError`` unless every atlas pair lives on ``target``'s grid."""
    if not atlases:
        raise ValueError("need at least one atlas")
    for i, (img, lbl) in enumerate(atlases):
        if not lbl.is_label:
            raise ValueError(f"atlas {i}: label volume has kind {lbl.kind.value}")
        for name, v in (("image", img), ("label", lbl)):
            if not v.same_grid(target):
                raise ValueError(
                    f"atlas {i} {name} grid {v.dims} @ {v.spacing_mm} does not match target "
                    f"{target.dims} @ {target.spacing_mm}; atlases must be registered to the target"
                )


def read_atlas_dir(directory) -> tuple[list[str], list[Atlas]]:
    """Load every ``<name>_img`` / ``<name>_lbl`` pair in ``directory``, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"atlas directory {d} does not exist")
    names = sorted(p.name[: -len("_img.json")] for p in d.glob("*_img.json"))
    if not names:
        raise FileNotFoundError(f"no '*_img.json' atlas images in {d}")
    atlases = []
    for name in names:
        img = read_volume(d / f"{name}_img")
        lbl = read_volume(d / f"{name}_lbl")
        if not lbl.is_label:
            raise VolumeFormatError(f"{name}_lbl must have dtype u8")
        atlases.append(Atlas(img, lbl))
    return names, atlases


def write_atlas_dir(directory, atlases: Sequence[Atlas], prefix: str = "atlas") -> list[str]:
    d = Path(directory)
    os.makedirs(d, exist_ok=True)
    width = max(2, len(str(len(atlases) - 1)))
    names = []
    for i, (img, lbl) in enumerate(atlases):
        name = f"{prefix}{i:0{width}d}"
        write_volume(img, d / f"{name}_img")
        write_volume(lbl, d / f"{name}_lbl")
        names.append(name)
    return names
