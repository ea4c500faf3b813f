"""Fractal softmax: max-lift leaf logits up the class tree, softmax per level.

Background is not a tree node; its logit is passed upward unchanged so each
level keeps a full probability simplex.  With that choice the level-l
softmax denominator never exceeds the level-(l+1) one, which is what makes
parent probabilities dominate child probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import LabelVolume, LogitField, load_vgrid, save_vgrid
from .tree import SemanticTree


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_leaf_field(tree: SemanticTree, leaf: LogitField | np.ndarray) -> np.ndarray:
    if isinstance(leaf, LogitField):
        expected = tree.channel_map(tree.depth)
        if leaf.channel_map != expected:
            raise ValueError(
                f"channel-map mismatch: field has {leaf.channel_map}, tree leaves are {expected}"
            )
        data = leaf.data
    else:
        data = np.asarray(leaf)
        if data.shape[0] != len(tree.leaf_classes) + 1:
            raise ValueError(
                f"channel-map mismatch: {data.shape[0]} channels for {len(tree.leaf_classes)} leaves"
            )
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite logits")
    return data


def lift_logits(tree: SemanticTree, leaf: LogitField | np.ndarray) -> list[np.ndarray]:
    """Per-level logits ``[y_1, ..., y_L]``; each parent takes the max over its children."""
    y = _check_leaf_field(tree, leaf)
    out = [y]
    for level in range(tree.depth - 1, 0, -1):
        child = out[0]
        groups = tree.child_index(level)
        lifted = np.empty((len(groups),) + child.shape[1:], dtype=child.dtype)
        for c, kids in enumerate(groups):
            lifted[c] = child[kids[0]] if len(kids) == 1 else child[list(kids)].max(axis=0)
        out.insert(0, lifted)
    return out


@dataclass(frozen=True, eq=False)
class ProbabilityPyramid:
    """Per-level probabilities (index 0 is level 1) with the lifted logits they came from."""

    probs: tuple[np.ndarray, ...]
    logits: tuple[np.ndarray, ...]
    channel_maps: tuple[tuple[int, ...], ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def depth(self) -> int:
        return len(self.probs)

    def level(self, l: int) -> np.ndarray:
        return self.probs[l - 1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs[0].shape[1:]

    def as_fields(self) -> list[LogitField]:
        return [
            LogitField(p, cmap, self.spacing) for p, cmap in zip(self.probs, self.channel_maps)
        ]


def fractal_softmax(tree: SemanticTree, leaf: LogitField | np.ndarray) -> ProbabilityPyramid:
    lifted = lift_logits(tree, leaf)
    probs = tuple(softmax(y) for y in lifted)
    spacing = leaf.spacing if isinstance(leaf, LogitField) else (1.0, 1.0, 1.0)
    return ProbabilityPyramid(
        probs,
        tuple(lifted),
        tuple(tree.channel_map(l) for l in range(1, tree.depth + 1)),
        spacing,
    )


def save_pyramid(pyr: ProbabilityPyramid, prefix: str | Path) -> list[Path]:
    """Write one .vgrid per level as ``<prefix>.level<l>.vgrid``."""
    paths = []
    for l, f in enumerate(pyr.as_fields(), start=1):
        p = Path(f"{prefix}.level{l}.vgrid")
        save_vgrid(f, p)
        paths.append(p)
    return paths


def load_pyramid(prefix: str | Path, depth: int) -> ProbabilityPyramid:
    fields = [load_vgrid(f"{prefix}.level{l}.vgrid", kind="logits") for l in range(1, depth + 1)]
    probs = tuple(np.asarray(f.data, dtype=np.float64) for f in fields)
    return ProbabilityPyramid(
        probs, tuple(), tuple(f.channel_map for f in fields), fields[0].spacing
    )


# -- constraint verification -------------------------------------------------


@dataclass
class Violations:
    count: int = 0
    worst: float = 0.0

    def add(self, excess: np.ndarray, tol: float) -> None:
        """Record entries of ``excess`` above ``tol``; ``worst`` keeps the raw excess."""
        hit = excess[excess > tol]
        if hit.size:
            self.count += int(hit.size)
            self.worst = max(self.worst, float(hit.max()))


@dataclass
class ConstraintReport:
    tol: float
    positive: Violations = field(default_factory=Violations)  # parent/child ordering
    negative: Violations = field(default_factory=Violations)  # every ancestor/descendant pair
    exclusive: Violations = field(default_factory=Violations)  # same-level pairs
    background: Violations = field(default_factory=Violations)  # p_bg(l) >= p_bg(l+1)

    @property
    def ok(self) -> bool:
        return self.total == 0

    @property
    def total(self) -> int:
        return self.positive.count + self.negative.count + self.exclusive.count + self.background.count

    @property
    def worst(self) -> float:
        return max(self.positive.worst, self.negative.worst, self.exclusive.worst, self.background.worst)

    def to_json(self) -> dict:
        def v(x: Violations) -> dict:
            return {"count": x.count, "worst_margin": x.worst}

        return {
            "tol": self.tol,
            "ok": self.ok,
            "positive_constraint": v(self.positive),
            "negative_constraint": v(self.negative),
            "exclusivity_constraint": v(self.exclusive),
            "background_monotonicity": v(self.background),
        }


def check_constraints(pyr: ProbabilityPyramid, tree: SemanticTree, tol: float = 1e-9) -> ConstraintReport:
    """Count probability-ordering violations beyond ``tol`` across the pyramid.

    positive:  p_child <= p_parent
    negative:  p_descendant <= p_ancestor, for ancestors at any distance
    exclusive: p_v <= 1 - p_u for distinct channels of one level
    background: p_bg(l) >= p_bg(l+1)
    """
    if pyr.depth != tree.depth:
        raise ValueError(f"pyramid has {pyr.depth} levels, tree has {tree.depth}")
    for l in range(1, tree.depth + 1):
        if pyr.channel_maps and pyr.channel_maps[l - 1] != tree.channel_map(l):
            raise ValueError(f"level {l} channel map does not match the tree")
    rep = ConstraintReport(tol)
    L = tree.depth

    # chan[l][c] = channel at level l-1 ancestor ... build per-level parent index once
    parent_of = {}
    for l in range(1, L):
        idx = np.zeros(len(tree.channel_map(l + 1)), dtype=np.intp)
        for pc, kids in enumerate(tree.child_index(l)):
            idx[list(kids)] = pc
        parent_of[l + 1] = idx

    for l in range(2, L + 1):
        p, pp = pyr.level(l), pyr.level(l - 1)
        fg = np.arange(1, p.shape[0])
        rep.positive.add(p[fg] - pp[parent_of[l][fg]], tol)
        anc = parent_of[l][fg]
        for la in range(l - 1, 0, -1):
            rep.negative.add(p[fg] - pyr.level(la)[anc], tol)
            if la > 1:
                anc = parent_of[la][anc]
        rep.background.add(p[0] - pyr.level(l - 1)[0], tol)

    for l in range(1, L + 1):
        p = pyr.level(l)
        for i in range(p.shape[0]):
            for j in range(i + 1, p.shape[0]):
                rep.exclusive.add(p[i] + p[j] - 1.0, tol)
    return rep


# -- decoding ----------------------------------------------------------------


def decode_array(probs: np.ndarray, channel_map) -> np.ndarray:
    """Argmax over channels, ties to the first channel (channels are in ascending id order)."""
    idx = np.argmax(probs, axis=0)
    return np.asarray(channel_map, dtype=np.int64)[idx]


def decode(pyr: ProbabilityPyramid, tree: SemanticTree) -> list[LabelVolume]:
    """Hard labels per level, level 1 first."""
    return [
        LabelVolume(decode_array(pyr.level(l), tree.channel_map(l)), pyr.spacing)
        for l in range(1, tree.depth + 1)
    ]


def decode_leaf(leaf: LogitField) -> LabelVolume:
    """Leaf-level decode; softmax is monotone so the logit argmax is the probability argmax."""
    return LabelVolume(decode_array(leaf.data, leaf.channel_map), leaf.spacing)
