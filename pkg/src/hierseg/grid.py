"""3D grids with physical spacing, .vgrid I/O, boxes, cropping and downsampling.

Arrays are indexed ``[x, y, z]`` (logit fields ``[channel, x, y, z]``).  The
on-disk payload is little-endian with channel slowest and x fastest, which is
Fortran order over ``(x, y, z)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"VGRD1\n"
LABEL_DTYPE = np.uint16


class VGridError(ValueError):
    pass


def _spacing(sp) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in sp)
    if len(sp) != 3 or not all(s > 0 and math.isfinite(s) for s in sp):
        raise ValueError(f"spacing must be three positive reals, got {sp}")
    return sp


def _origin(o) -> tuple[int, int, int]:
    o = tuple(int(v) for v in o)
    if len(o) != 3:
        raise ValueError(f"origin must have three components, got {o}")
    return o


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer class labels (0 = background) on a 3D grid."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {arr.shape}")
        if arr.dtype.kind not in "iu":
            raise VGridError(f"label data must be integer, got {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(LABEL_DTYPE).max):
            raise ValueError("label values must fit in u16")
        arr = np.array(arr, dtype=LABEL_DTYPE)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _spacing(self.spacing))
        object.__setattr__(self, "origin", _origin(self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray, **kw) -> "LabelVolume":
        return LabelVolume(data, kw.get("spacing", self.spacing), kw.get("origin", self.origin))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabelVolume)
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One real value per voxel (e.g. the image intensity)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.result_type(self.data, np.float32))
        if arr.ndim != 3:
            raise ValueError(f"scalar data must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _spacing(self.spacing))
        object.__setattr__(self, "origin", _origin(self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray, **kw) -> "ScalarField":
        return ScalarField(data, kw.get("spacing", self.spacing), kw.get("origin", self.origin))


@dataclass(frozen=True, eq=False)
class LogitField:
    """Per-channel real scores; ``channel_map[c]`` is the class id of channel c (0 = background)."""

    data: np.ndarray
    channel_map: tuple[int, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.result_type(self.data, np.float32))
        if arr.ndim != 4:
            raise ValueError(f"logit data must be (C, X, Y, Z), got shape {arr.shape}")
        cmap = tuple(int(c) for c in self.channel_map)
        if len(cmap) != arr.shape[0]:
            raise ValueError(f"channel map has {len(cmap)} entries for {arr.shape[0]} channels")
        if len(set(cmap)) != len(cmap) or cmap[0] != 0:
            raise ValueError("channel map must be distinct ids with background first")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logit field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "channel_map", cmap)
        object.__setattr__(self, "spacing", _spacing(self.spacing))
        object.__setattr__(self, "origin", _origin(self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


Grid = Union[LabelVolume, ScalarField, LogitField]


# -- bounding boxes ----------------------------------------------------------


@dataclass(frozen=True)
class BoundingBox:
    """Half-open voxel box ``[lo, hi)`` per axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo, hi = _origin(self.lo), _origin(self.hi)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box lo {lo} exceeds hi {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def full(cls, dims) -> "BoundingBox":
        return cls((0, 0, 0), tuple(dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def volume(self) -> int:
        return math.prod(self.shape)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def contains(self, other: "BoundingBox") -> bool:
        return all(a <= c for a, c in zip(self.lo, other.lo)) and all(
            d <= b for b, d in zip(self.hi, other.hi)
        )

    def fits(self, dims) -> bool:
        return all(0 <= a and b <= d for a, b, d in zip(self.lo, self.hi, dims))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def foreground_bbox(labels: LabelVolume | np.ndarray) -> BoundingBox:
    """Tightest box around all nonzero voxels."""
    arr = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    idx = np.nonzero(arr)
    if idx[0].size == 0:
        raise ValueError("empty foreground")
    return BoundingBox(tuple(int(i.min()) for i in idx), tuple(int(i.max()) + 1 for i in idx))


def expand_bbox(box: BoundingBox, m: float, dims) -> BoundingBox:
    """Scale each axis interval by ``m`` about its center, rounding outward, then clamp to ``dims``.

    A box reaching past ``dims`` is clamped too rather than rejected.
    """
    if m < 1:
        raise ValueError(f"expansion factor must be >= 1, got {m}")
    if len(tuple(dims)) != 3:
        raise ValueError(f"dims must have three axes, got {tuple(dims)}")
    lo, hi = [], []
    for a, b, d in zip(box.lo, box.hi, dims):
        # doubled coordinates keep the center integral: 2c = a + b, 2*half = m*(b - a)
        two_c, two_half = a + b, m * (b - a)
        lo.append(max(0, math.floor((two_c - two_half) / 2)))
        hi.append(min(int(d), math.ceil((two_c + two_half) / 2)))
    return BoundingBox(tuple(lo), tuple(hi))


# -- crop / paste ------------------------------------------------------------


def crop(v: Grid, box: BoundingBox) -> Grid:
    if not box.fits(v.dims):
        raise ValueError(f"box {box} not inside dims {v.dims}")
    origin = tuple(o + a for o, a in zip(v.origin, box.lo))
    if isinstance(v, LogitField):
        return LogitField(v.data[(slice(None),) + box.slices], v.channel_map, v.spacing, origin)
    return v.replace(v.data[box.slices], origin=origin)


def paste_back(dest: LabelVolume, patch: LabelVolume | np.ndarray, box: BoundingBox) -> LabelVolume:
    """Copy of ``dest`` with ``patch`` written into ``box``."""
    pdata = patch.data if isinstance(patch, LabelVolume) else np.asarray(patch)
    if not box.fits(dest.dims):
        raise ValueError(f"box {box} not inside dims {dest.dims}")
    if tuple(pdata.shape) != box.shape:
        raise ValueError(f"shape mismatch: patch {tuple(pdata.shape)} vs box {box.shape}")
    out = np.array(dest.data)
    out[box.slices] = pdata
    return dest.replace(out)


# -- downsampling ------------------------------------------------------------


def block_sum(arr: np.ndarray, factor: int) -> np.ndarray:
    """Sum over ``factor``-sized blocks; partial edge blocks are zero padded."""
    pads = [(0, (-s) % factor) for s in arr.shape]
    a = np.pad(arr, pads)
    nx, ny, nz = (s // factor for s in a.shape)
    return a.reshape(nx, factor, ny, factor, nz, factor).sum(axis=(1, 3, 5))


def downsample(v: LabelVolume | ScalarField, factor: int):
    """Integer-factor downsampling: label majority vote (ties to smallest id) or block mean."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    spacing = tuple(s * factor for s in v.spacing)
    if factor == 1:
        return v.replace(v.data, spacing=v.spacing)
    if isinstance(v, LabelVolume):
        classes = np.unique(v.data)
        best = None
        best_count = None
        for c in classes:  # ascending, so strict '>' keeps the smallest id on ties
            count = block_sum((v.data == c).astype(np.int32), factor)
            if best is None:
                best = np.full(count.shape, c, dtype=LABEL_DTYPE)
                best_count = count
            else:
                win = count > best_count
                best[win] = c
                best_count = np.where(win, count, best_count)
        return LabelVolume(best, spacing)
    if isinstance(v, ScalarField):
        total = block_sum(v.data.astype(np.float64), factor)
        count = block_sum(np.ones(v.dims, dtype=np.int32), factor)
        return ScalarField((total / count).astype(v.data.dtype), spacing)
    raise TypeError(f"cannot downsample {type(v).__name__}")


def block_any(mask: np.ndarray, factor: int) -> np.ndarray:
    """Coarse mask that is true wherever any voxel of the block is true."""
    return block_sum(np.asarray(mask, dtype=np.int32), factor) > 0


def upsample_nearest(arr: np.ndarray, factor: int, dims) -> np.ndarray:
    """Nearest-neighbour upsampling of a coarse grid back onto ``dims``."""
    out = arr
    for ax in range(3):
        out = np.repeat(out, factor, axis=ax)
    return out[: dims[0], : dims[1], : dims[2]]


# -- .vgrid I/O --------------------------------------------------------------


def save_vgrid(value: Grid, path: str | Path) -> None:
    if isinstance(value, LabelVolume):
        header = {"dims": list(value.dims), "channels": 1, "dtype": "u16"}
        payload = value.data.astype("<u2").tobytes(order="F")
    elif isinstance(value, ScalarField):
        header = {"dims": list(value.dims), "channels": 1, "dtype": "f32"}
        payload = value.data.astype("<f4").tobytes(order="F")
    elif isinstance(value, LogitField):
        header = {"dims": list(value.dims), "channels": value.channels, "dtype": "f32"}
        # (C, X, Y, Z) Fortran order would make C fastest; reverse axes then C order
        payload = np.ascontiguousarray(value.data.astype("<f4").transpose(0, 3, 2, 1)).tobytes()
    else:
        raise TypeError(f"cannot save {type(value).__name__}")
    header["spacing_mm"] = list(value.spacing)
    if isinstance(value, LogitField):
        header["channel_map"] = list(value.channel_map)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_vgrid(path: str | Path, kind: str | None = None) -> Grid:
    """Read a .vgrid file.  ``kind`` ('labels', 'scalar', 'logits') enforces the expected type."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise VGridError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise VGridError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        channels = int(header["channels"])
        dtype = header["dtype"]
        spacing = tuple(header["spacing_mm"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise VGridError(f"{path}: malformed header") from exc
    off += hlen
    if dtype not in ("u16", "f32"):
        raise VGridError(f"{path}: unsupported dtype {dtype!r}")
    if len(dims) != 3 or channels < 1:
        raise VGridError(f"{path}: bad dims/channels")
    cmap = header.get("channel_map")
    if kind == "labels" and dtype != "u16":
        raise VGridError(f"{path}: dtype {dtype} cannot be loaded as labels")
    if kind in ("scalar", "logits") and dtype != "f32":
        raise VGridError(f"{path}: dtype {dtype} cannot be loaded as {kind}")
    npdt = np.dtype("<u2") if dtype == "u16" else np.dtype("<f4")
    n = channels * math.prod(dims)
    payload = raw[off:]
    if len(payload) != n * npdt.itemsize:
        raise VGridError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {n * npdt.itemsize})"
        )
    flat = np.frombuffer(payload, dtype=npdt)
    if dtype == "u16":
        if channels != 1:
            raise VGridError(f"{path}: label volume must have one channel")
        data = flat.reshape(dims, order="F").astype(LABEL_DTYPE)
        return LabelVolume(data, spacing)
    if cmap is not None or kind == "logits":
        if cmap is None:
            raise VGridError(f"{path}: logit field without channel_map")
        data = flat.reshape((channels,) + dims[::-1]).transpose(0, 3, 2, 1).astype(np.float32)
        return LogitField(data, tuple(cmap), spacing)
    if channels != 1:
        raise VGridError(f"{path}: multi-channel field without channel_map")
    return ScalarField(flat.reshape(dims, order="F").astype(np.float32), spacing)
