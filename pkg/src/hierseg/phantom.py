"""Deterministic synthetic vessel phantoms.

A trunk cylinder runs along z through the centre of the phantom region.
Branches are thinner cylinders along x or y that start on the trunk axis and
run to the region edge.  Each branch sits in its own z slot so branches never
touch each other.  Randomness comes from ``numpy.random.default_rng(seed)``
(PCG64), drawn in a fixed order: leaf permutation (``policy='random'``), then
per branch: radius, direction, z offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import BoundingBox, LabelVolume, ScalarField
from .tree import SemanticTree

_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))  # (+x, -x, +y, -y)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    trunk_radius: int = 6
    branch_count: int = 4
    branch_radius: tuple[int, int] = (1, 3)
    policy: str = "sequential"  # or "random"
    seed: int = 7
    region: BoundingBox | None = None  # defaults to the full volume

    def __post_init__(self):
        if self.trunk_radius < 1 or min(self.branch_radius) < 1:
            raise ValueError("radii must be >= 1")
        if self.branch_radius[0] > self.branch_radius[1]:
            raise ValueError("branch radius range is reversed")
        if self.branch_count < 0:
            raise ValueError("branch count must be >= 0")
        if self.policy not in ("sequential", "random"):
            raise ValueError(f"unknown leaf-class policy {self.policy!r}")


def _disk(dx: np.ndarray, dy: np.ndarray, r: int) -> np.ndarray:
    return dx * dx + dy * dy <= r * r


def generate_vessel_phantom(spec: PhantomSpec, tree: SemanticTree) -> LabelVolume:
    leaves = list(tree.leaf_classes)
    if spec.branch_count + 1 > len(leaves):
        raise ValueError(f"{spec.branch_count} branches need {spec.branch_count + 1} leaf classes, tree has {len(leaves)}")
    region = spec.region or BoundingBox.full(spec.dims)
    if not region.fits(spec.dims):
        raise ValueError(f"region {region} does not fit in dims {spec.dims}")
    rng = np.random.default_rng(spec.seed)
    if spec.policy == "random":
        leaves = [leaves[i] for i in rng.permutation(len(leaves))]

    (x0, y0, z0), (x1, y1, z1) = region.lo, region.hi
    cx, cy = (x0 + x1 - 1) // 2, (y0 + y1 - 1) // 2
    if 2 * spec.trunk_radius + 1 > min(x1 - x0, y1 - y0):
        raise ValueError("trunk does not fit in the region")

    X, Y, Z = spec.dims
    xs = np.arange(X)[:, None]
    ys = np.arange(Y)[None, :]
    data = np.zeros(spec.dims, dtype=np.uint16)
    trunk = _disk(xs - cx, ys - cy, spec.trunk_radius)
    data[:, :, z0:z1][trunk] = leaves[0]

    n = spec.branch_count
    if n:
        slot = (z1 - z0) // n
        for i in range(n):
            r = int(rng.integers(spec.branch_radius[0], spec.branch_radius[1] + 1))
            sx, sy = _DIRECTIONS[int(rng.integers(0, 4))]
            room = slot - (2 * r + 1)
            if room < 0:
                raise ValueError("branches don't fit in dims")
            zc = z0 + i * slot + r + int(rng.integers(0, room + 1))
            if sx:
                reach = (x1 - 1 - cx) if sx > 0 else (cx - x0)
                if reach <= spec.trunk_radius:
                    raise ValueError("branches don't fit in dims")
                lo, hi = (cx, x1) if sx > 0 else (x0, cx + 1)
                zz = np.arange(Z)[None, :]
                cross = _disk(ys.T - cy, zz - zc, r)  # (Y, Z)
                block = data[lo:hi]
                sel = np.broadcast_to(cross, block.shape) & (block == 0)
                block[sel] = leaves[i + 1]
            else:
                reach = (y1 - 1 - cy) if sy > 0 else (cy - y0)
                if reach <= spec.trunk_radius:
                    raise ValueError("branches don't fit in dims")
                lo, hi = (cy, y1) if sy > 0 else (y0, cy + 1)
                zz = np.arange(Z)[None, :]
                cross = _disk(xs - cx, zz - zc, r)  # (X, Z)
                block = data[:, lo:hi]
                sel = np.broadcast_to(cross[:, None, :], block.shape) & (block == 0)
                block[sel] = leaves[i + 1]
    # keep everything inside the region (branch disks may poke past its z/x/y bounds)
    clip = np.zeros(spec.dims, dtype=bool)
    clip[region.slices] = True
    data[~clip] = 0
    return LabelVolume(data, spec.spacing)


def phantom_image(labels: LabelVolume, sigma: float = 1.0, seed: int | None = None, noise: float = 0.0) -> ScalarField:
    """Scalar stand-in for the CT image: the foreground mask blurred by a Gaussian."""
    img = ndimage.gaussian_filter((labels.data != 0).astype(np.float64), sigma)
    if noise:
        img = img + np.random.default_rng(seed).normal(0.0, noise, size=img.shape)
    return ScalarField(img.astype(np.float32), labels.spacing)


def imbalance_stats(labels: LabelVolume | np.ndarray) -> list[tuple[int, float]]:
    """(class id, voxel fraction) pairs, largest fraction first (ties by id)."""
    arr = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    ids, counts = np.unique(arr, return_counts=True)
    frac = counts / arr.size
    order = sorted(range(len(ids)), key=lambda i: (-counts[i], ids[i]))
    return [(int(ids[i]), float(frac[i])) for i in order]


def foreground_ratio(labels: LabelVolume | np.ndarray) -> float:
    """Largest over smallest foreground class voxel count."""
    stats = [(c, f) for c, f in imbalance_stats(labels) if c != 0]
    if not stats:
        raise ValueError("no foreground classes")
    return stats[0][1] / stats[-1][1]


def acceptance_phantom(tree: SemanticTree, seed: int = 7) -> LabelVolume:
    """96^3 phantom whose vessels fill a centred 24^3 region (1/4 of each axis)."""
    spec = PhantomSpec(
        dims=(96, 96, 96),
        trunk_radius=6,
        branch_count=3,
        branch_radius=(1, 2),
        seed=seed,
        region=BoundingBox((36, 36, 36), (60, 60, 60)),
    )
    return generate_vessel_phantom(spec, tree)


def imbalance_phantom(tree: SemanticTree, seed: int = 7) -> LabelVolume:
    """Small phantom with a thick trunk and thin branches (trunk:thinnest >= 20:1)."""
    spec = PhantomSpec(
        dims=(24, 24, 24),
        trunk_radius=5,
        branch_count=2,
        branch_radius=(1, 1),
        seed=seed,
    )
    return generate_vessel_phantom(spec, tree)
