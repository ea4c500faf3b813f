"""Toy training: gradient descent directly on per-voxel leaf logits.

No network is involved; every voxel owns its logits.  This isolates the
loss geometry so hierarchical and flat supervision can be compared under
identical optimisation settings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fractal import decode_array
from .grid import LabelVolume, LogitField
from .loss import LossWeights, TrainingSchedule, _Forward, curriculum_weights
from .metrics import dice
from .tree import SemanticTree

@dataclass
class TrainingCurve:
    classes: tuple[int, ...]
    loss: list[float] = field(default_factory=list)
    dice: list[dict[int, float]] = field(default_factory=list)
    level_weights: list[tuple[float, ...]] = field(default_factory=list)
    diverged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def write_csv(self, path: str | Path) -> None:
        n_levels = len(self.level_weights[0]) if self.level_weights else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["epoch", "loss"]
                + [f"dice_{c}" for c in self.classes]
                + [f"lambda_{l}" for l in range(1, n_levels + 1)]
            )
            for e in range(self.epochs):
                w.writerow(
                    [e, repr(self.loss[e])]
                    + [repr(float(self.dice[e][c])) for c in self.classes]
                    + [repr(x) for x in self.level_weights[e]]
                )


@dataclass
class FitResult:
    curve: TrainingCurve
    logits: LogitField


def _class_dice(pred: np.ndarray, ref: np.ndarray, classes) -> dict[int, float]:
    return {c: dice(pred == c, ref == c) for c in classes}


def fit_logits(
    labels: LabelVolume,
    tree: SemanticTree,
    weights: LossWeights | None = None,
    schedule: TrainingSchedule | None = None,
    epochs: int = 200,
    step: float = 1.0,
    seed: int = 0,
) -> FitResult:
    """Full-batch gradient descent from seeded N(0, 0.01^2) logits.

    With a ``schedule`` the level weights follow :func:`curriculum_weights`;
    otherwise ``weights.levels`` is used throughout.  A non-finite loss stops
    training; the curve then ends at the last finite epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    cmap = tree.channel_map(tree.depth)
    y = rng.normal(0.0, 0.01, size=(len(cmap),) + labels.dims)
    classes = tuple(int(c) for c in np.unique(labels.data) if c != 0)
    curve = TrainingCurve(classes)
    for epoch in range(epochs):
        if schedule is not None:
            w = weights.with_levels(curriculum_weights(epoch, schedule, tree.depth))
        else:
            w = weights
        fw = _Forward(y, labels.data, tree, w)
        if not math.isfinite(fw.loss):
            curve.diverged = True
            break
        pred = decode_array(y, cmap)
        curve.loss.append(float(fw.loss))
        curve.dice.append(_class_dice(pred, labels.data, classes))
        curve.level_weights.append(
            tuple(float(x) for x in (w.levels if w.levels is not None else np.ones(tree.depth)))
        )
        grad = fw.gradient()
        y = y - step * grad
        if not np.all(np.isfinite(y)):
            curve.diverged = True
            break
    return FitResult(curve, LogitField(y, cmap, labels.spacing))


def minority_class(labels: LabelVolume) -> int:
    """Smallest foreground class by voxel count (ties to smallest id)."""
    ids, counts = np.unique(labels.data[labels.data != 0], return_counts=True)
    if ids.size == 0:
        raise ValueError("no foreground")
    order = sorted(zip(counts.tolist(), ids.tolist()))
    return int(order[0][1])


def flat_weights(tree: SemanticTree, base: LossWeights | None = None) -> LossWeights:
    """Leaf-only supervision with the same term weights as ``base``."""
    base = base or LossWeights()
    return base.with_levels([0.0] * (tree.depth - 1) + [1.0])


@dataclass
class ConvergenceReport:
    minority_class: int
    minority_fraction: float  # share of foreground voxels
    threshold: float
    hier_epochs: int | None
    flat_epochs: int | None
    hier_final_dice: float
    flat_final_dice: float
    epochs: int

    @property
    def winner(self) -> str:
        if self.hier_epochs is None and self.flat_epochs is None:
            return "no winner"
        if self.flat_epochs is None or (self.hier_epochs is not None and self.hier_epochs < self.flat_epochs):
            return "hierarchical"
        if self.hier_epochs is None or self.flat_epochs < self.hier_epochs:
            return "flat"
        return "tie"

    def to_json(self) -> dict:
        return {
            "minority_class": self.minority_class,
            "minority_fraction": self.minority_fraction,
            "threshold": self.threshold,
            "epochs": self.epochs,
            "hierarchical_epochs_to_threshold": self.hier_epochs,
            "flat_epochs_to_threshold": self.flat_epochs,
            "hierarchical_final_dice": self.hier_final_dice,
            "flat_final_dice": self.flat_final_dice,
            "winner": self.winner,
        }


def epochs_to_threshold(curve: TrainingCurve, cls: int, threshold: float) -> int | None:
    for e, d in enumerate(curve.dice):
        if d[cls] >= threshold:
            return e
    return None


def compare_convergence(
    labels: LabelVolume,
    tree: SemanticTree,
    epochs: int = 200,
    seed: int = 7,
    step: float = 1.0,
    weights: LossWeights | None = None,
    threshold: float = 0.8,
    curriculum: bool = True,
) -> ConvergenceReport:
    """Hierarchical (all levels, curriculum) versus flat (leaf only) on the same phantom and seed.

    Both runs track the smallest foreground class.
    """
    weights = weights or LossWeights()
    minority = minority_class(labels)
    fraction = np.count_nonzero(labels.data == minority) / np.count_nonzero(labels.data)
    schedule = TrainingSchedule(epochs) if curriculum else None
    hier = fit_logits(labels, tree, weights, schedule, epochs, step, seed).curve
    flat = fit_logits(labels, tree, flat_weights(tree, weights), None, epochs, step, seed).curve
    return ConvergenceReport(
        minority,
        float(fraction),
        threshold,
        epochs_to_threshold(hier, minority, threshold),
        epochs_to_threshold(flat, minority, threshold),
        hier.dice[-1][minority],
        flat.dice[-1][minority],
        epochs,
    )
