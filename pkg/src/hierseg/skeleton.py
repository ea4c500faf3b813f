"""Topology-preserving 3D thinning (26-connected foreground, 6-connected background).

Border voxels are peeled in six directional sub-iterations.  A voxel is
removed only if it is simple and not a curve end point (exactly one
26-neighbour); candidates are collected per direction and then deleted one at
a time in raster order, re-testing simplicity against the current state.
The loop stops after a full round without deletions, so the result is a fixed
point: thinning it again changes nothing.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

_OFFSETS = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
_CENTER = 13
_WEIGHTS = np.array([1 << i for i in range(27)], dtype=np.int64).reshape(3, 3, 3)


def _adjacency(kind: int) -> list[list[int]]:
    out = []
    for i, p in enumerate(_OFFSETS):
        row = []
        for j, q in enumerate(_OFFSETS):
            if i == j:
                continue
            d = [abs(x - y) for x, y in zip(p, q)]
            if max(d) > 1:
                continue
            s = sum(d)
            if (kind == 6 and s == 1) or (kind == 26):
                row.append(j)
        out.append(row)
    return out


_ADJ26 = _adjacency(26)
_ADJ6 = _adjacency(6)
_N18 = frozenset(i for i, p in enumerate(_OFFSETS) if i != _CENTER and sum(map(abs, p)) <= 2)
_N6 = frozenset(i for i, p in enumerate(_OFFSETS) if sum(map(abs, p)) == 1)


def _components(members: set[int], adj) -> list[set[int]]:
    seen: set[int] = set()
    comps = []
    for s in sorted(members):
        if s in seen:
            continue
        comp = {s}
        stack = [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    comp.add(v)
                    stack.append(v)
        comps.append(comp)
    return comps


@lru_cache(maxsize=None)
def is_simple(config: int) -> bool:
    """Whether the centre of a 3x3x3 configuration (bit i = offset i) is a simple point."""
    fg = {i for i in range(27) if i != _CENTER and config >> i & 1}
    if len(_components(fg, _ADJ26)) != 1:
        return False
    bg = {i for i in _N18 if not config >> i & 1}
    touching = [c for c in _components(bg, _ADJ6) if c & _N6]
    return len(touching) == 1


def _config_at(a: np.ndarray, x: int, y: int, z: int) -> int:
    return int(np.sum(_WEIGHTS[a[x - 1 : x + 2, y - 1 : y + 2, z - 1 : z + 2]]))


_DIRECTIONS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Curve skeleton of a binary 3D mask; output is a subset with the same components."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    a = np.pad(mask, 1)
    X, Y, Z = a.shape
    cube = np.ones((3, 3, 3))
    changed = True
    while changed:
        changed = False
        for dx, dy, dz in _DIRECTIONS:
            nb = a[1 + dx : X - 1 + dx, 1 + dy : Y - 1 + dy, 1 + dz : Z - 1 + dz]
            inner = a[1:-1, 1:-1, 1:-1]
            border = inner & ~nb
            if not border.any():
                continue
            counts = ndimage.convolve(a.astype(np.int16), cube.astype(np.int16), mode="constant")[1:-1, 1:-1, 1:-1]
            candidates = np.argwhere(border & (counts - 1 != 1))
            for x, y, z in candidates + 1:
                cfg = _config_at(a, x, y, z)
                if bin(cfg).count("1") - 1 == 1:
                    continue  # became an end point after earlier deletions
                if is_simple(cfg):
                    a[x, y, z] = False
                    changed = True
    return a[1:-1, 1:-1, 1:-1].copy()
