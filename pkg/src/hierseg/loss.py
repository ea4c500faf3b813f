"""Multi-level hierarchical loss with analytic gradients w.r.t. leaf logits.

    loss = (1/lambda_sum) * sum_{l<=L_s} lambda_l * (lambda_ce*CE_l + lambda_dice*Dice_l)
           + lambda_cbdice * topology_term

Per-level probabilities come from :func:`hierseg.fractal.fractal_softmax` and
per-level targets from projecting the leaf labels up the tree.  The topology
term is a soft centerline F1 on the merged foreground (1 - p_background) at
the leaf level, using the same precision/sensitivity composition as the hard
cl-X-Dice metric with set operations replaced by products.

Gradients are hand-derived: max-lift routes a parent's gradient to its argmax
child (ties to the smallest id); min/max pools in the soft skeleton route to
their selected neighbour; relu kinks use derivative 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fractal import softmax
from .grid import LabelVolume, LogitField
from .tree import SemanticTree

CE_CLAMP = 1e-12

# center first, so pooling ties resolve to the voxel itself
_CROSS = ((0, 0, 0), (-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lambda_cbdice: float = 1.0
    levels: tuple[float, ...] | None = None  # per-level weights; None = all ones
    supervised_levels: int | None = None  # L_s; None = every level
    k: int = 3
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_dice", "lambda_cbdice"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
            if any(x < 0 for x in self.levels):
                raise ValueError("level weights must be non-negative")
        if self.supervised_levels is not None and self.supervised_levels < 1:
            raise ValueError("supervised_levels must be >= 1")
        if self.k < 1:
            raise ValueError("soft-skeleton iterations k must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def level_factors(self, depth: int) -> np.ndarray:
        """lambda_l / lambda_sum for l = 1..depth, zero beyond L_s."""
        lam = np.ones(depth) if self.levels is None else np.asarray(self.levels, dtype=np.float64)
        if lam.size != depth:
            raise ValueError(f"{lam.size} level weights for a depth-{depth} tree")
        ls = depth if self.supervised_levels is None else self.supervised_levels
        if ls > depth:
            raise ValueError(f"supervised_levels {ls} exceeds tree depth {depth}")
        lam = lam.copy()
        lam[ls:] = 0.0
        total = lam.sum()
        if total <= 0:
            raise ValueError("lambda_sum must be positive")
        return lam / total

    def with_levels(self, levels) -> "LossWeights":
        d = asdict(self)
        d["levels"] = tuple(levels)
        return LossWeights(**d)

    def to_json(self) -> dict:
        return {
            "lambda_ce": self.lambda_ce,
            "lambda_dice": self.lambda_dice,
            "lambda_cbdice": self.lambda_cbdice,
            "levels": None if self.levels is None else list(self.levels),
            "supervised_levels": self.supervised_levels,
            "k": self.k,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LossWeights":
        known = {"lambda_ce", "lambda_dice", "lambda_cbdice", "levels", "supervised_levels", "k", "epsilon"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**doc)


def load_loss_config(path: str | Path) -> LossWeights:
    return LossWeights.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- curriculum --------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    """Coarse-to-fine ramp.  ``start_fractions[l-1]`` is where level l starts ramping in."""

    epochs: int
    start_fractions: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("schedule needs at least one epoch")


def curriculum_weights(epoch: int, schedule: TrainingSchedule, depth: int) -> np.ndarray:
    """Level weights at ``epoch``: level 1 always 1, level l ramps 0 -> 1 from (l-1)/L of training to the last epoch."""
    E = schedule.epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    starts = schedule.start_fractions or tuple((l - 1) / depth for l in range(1, depth + 1))
    if len(starts) != depth:
        raise ValueError(f"{len(starts)} start fractions for depth {depth}")
    lam = np.ones(depth)
    last = E - 1
    for i in range(1, depth):
        s = starts[i] * E
        if epoch >= last:
            lam[i] = 1.0
        elif epoch <= s:
            lam[i] = 0.0
        else:
            lam[i] = min(1.0, (epoch - s) / (last - s))
    return lam


# -- per-level terms ---------------------------------------------------------


def _labels_array(g) -> np.ndarray:
    return g.data if isinstance(g, LabelVolume) else np.asarray(g)


def _channel_index(labels: np.ndarray, channel_map) -> np.ndarray:
    lut = {c: i for i, c in enumerate(channel_map)}
    flat = labels.ravel()
    uniq = np.unique(flat)
    missing = [int(u) for u in uniq if int(u) not in lut]
    if missing:
        raise ValueError(f"label(s) {missing} not in class set {tuple(channel_map)}")
    table = np.zeros(int(uniq.max()) + 1, dtype=np.intp)
    for u in uniq:
        table[u] = lut[int(u)]
    return table[labels]


def cross_entropy_level(p: np.ndarray, g, channel_map=None) -> float:
    """Mean -log p[true class]; ``g`` holds channel indices unless ``channel_map`` is given."""
    gi = _labels_array(g)
    if channel_map is not None:
        gi = _channel_index(gi, channel_map)
    pt = np.take_along_axis(p, gi[None].astype(np.intp), axis=0)[0]
    return float(np.mean(-np.log(np.clip(pt, CE_CLAMP, 1.0))))


def soft_dice_level(p: np.ndarray, g, epsilon: float = 1e-5, channel_map=None) -> float:
    """1 - mean over foreground channels of (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    gi = _labels_array(g)
    if channel_map is not None:
        gi = _channel_index(gi, channel_map)
    C = p.shape[0]
    ratios = []
    for c in range(1, C):
        gc = gi == c
        inter = float(p[c][gc].sum())
        ratios.append((2.0 * inter + epsilon) / (float(p[c].sum()) + float(gc.sum()) + epsilon))
    return 1.0 - float(np.mean(ratios))


# -- soft skeleton -----------------------------------------------------------


def _pool(x: np.ndarray, op) -> tuple[np.ndarray, np.ndarray]:
    X, Y, Z = x.shape
    p = np.pad(x, 1)  # zero border = background
    stack = np.stack([p[1 + a : 1 + a + X, 1 + b : 1 + b + Y, 1 + c : 1 + c + Z] for a, b, c in _CROSS])
    idx = op(stack, axis=0)
    return np.take_along_axis(stack, idx[None], axis=0)[0], idx


def _pool_back(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    X, Y, Z = g.shape
    gp = np.zeros((X + 2, Y + 2, Z + 2))
    for k, (a, b, c) in enumerate(_CROSS):
        gp[1 + a : 1 + a + X, 1 + b : 1 + b + Y, 1 + c : 1 + c + Z] += np.where(idx == k, g, 0.0)
    return gp[1:-1, 1:-1, 1:-1]


class SoftSkeleton:
    """Iterated min/max-pool soft thinning over the 6-neighbourhood, with its backward pass."""

    def __init__(self, x: np.ndarray, k: int = 3):
        if k < 1:
            raise ValueError("soft-skeleton iterations k must be >= 1")
        x = np.asarray(x, dtype=np.float64)
        self.k = k
        self.steps = []
        img = x
        skel = None
        for j in range(k + 1):
            rec = {}
            if j > 0:
                img, rec["shrink"] = _pool(img, np.argmin)
            er, rec["erode"] = _pool(img, np.argmin)
            op, rec["dilate"] = _pool(er, np.argmax)
            delta = img - op
            rec["delta_mask"] = delta > 0
            delta = np.where(rec["delta_mask"], delta, 0.0)
            if skel is None:
                skel = delta
            else:
                t = delta - skel * delta
                rec["t_mask"] = t > 0
                rec["delta"] = delta
                rec["skel_prev"] = skel
                skel = skel + np.where(rec["t_mask"], t, 0.0)
            self.steps.append(rec)
        self.value = skel

    def backward(self, g: np.ndarray) -> np.ndarray:
        g_skel = np.asarray(g, dtype=np.float64)
        g_img = np.zeros_like(g_skel)
        for j in range(self.k, -1, -1):
            rec = self.steps[j]
            if j > 0:
                gt = np.where(rec["t_mask"], g_skel, 0.0)
                g_delta = gt * (1.0 - rec["skel_prev"])
                g_skel = g_skel - gt * rec["delta"]
            else:
                g_delta = g_skel
            gd = np.where(rec["delta_mask"], g_delta, 0.0)
            g_img = g_img + gd
            g_img = g_img + _pool_back(_pool_back(-gd, rec["dilate"]), rec["erode"])
            if j > 0:
                g_img = _pool_back(g_img, rec["shrink"])
        return g_img

    def signature(self) -> list[np.ndarray]:
        out = []
        for rec in self.steps:
            out.extend(v for key, v in sorted(rec.items()) if key not in ("delta", "skel_prev"))
        return out


def soft_skeleton(prob: np.ndarray, k: int = 3) -> np.ndarray:
    return SoftSkeleton(prob, k).value


# -- topology term -----------------------------------------------------------


def _soft_f1_parts(sp, vp, sl, vl, eps):
    """Soft Tprec / Tsens with intersections as products and unions a+b-ab."""
    num_p = float(np.sum(sp * vl))
    den_p = float(np.sum(sp * (1.0 - sl)) + np.sum(sp * (sl + vl - sl * vl)))
    num_s = float(np.sum(sl * vp))
    den_s = float(np.sum(sl * (1.0 - sp)) + np.sum(sl * (sp + vp - sp * vp)))
    return num_p, den_p, num_s, den_s


def cbdice_term(p_leaf: np.ndarray, g, weights: LossWeights | None = None, channel_map=None) -> float:
    """1 - soft topological F1 of the merged foreground against the binary label foreground."""
    return _cbdice(p_leaf, g, weights or LossWeights(), channel_map)[0]


def _cbdice(p_leaf, g, weights, channel_map=None, need_grad=False):
    labels = _labels_array(g)
    if channel_map is not None:
        labels = _channel_index(labels, channel_map)
    eps = weights.epsilon
    vp = 1.0 - p_leaf[0]
    vl = (labels != 0).astype(np.float64)
    skp = SoftSkeleton(vp, weights.k)
    sp = skp.value
    sl = SoftSkeleton(vl, weights.k).value
    num_p, den_p, num_s, den_s = _soft_f1_parts(sp, vp, sl, vl, eps)
    tp = (num_p + eps) / (den_p + eps)
    ts = (num_s + eps) / (den_s + eps)
    f1 = 2.0 * tp * ts / (tp + ts)
    term = 1.0 - f1
    if not need_grad:
        return term, None, skp
    dtp = -2.0 * ts * ts / (tp + ts) ** 2
    dts = -2.0 * tp * tp / (tp + ts) ** 2
    Dp, Ds = den_p + eps, den_s + eps
    # d/d sp
    d_tp_sp = (vl * Dp - (num_p + eps) * ((1.0 - sl) + (sl + vl - sl * vl))) / Dp**2
    d_ts_sp = -(num_s + eps) * (-sl + sl * (1.0 - vp)) / Ds**2
    # d/d vp (direct)
    d_ts_vp = (sl * Ds - (num_s + eps) * sl * (1.0 - sp)) / Ds**2
    g_sp = dtp * d_tp_sp + dts * d_ts_sp
    g_vp = dts * d_ts_vp + skp.backward(g_sp)
    return term, g_vp, skp


# -- total loss and gradient -------------------------------------------------


def _route_indices(tree: SemanticTree, lifted_child: np.ndarray, level: int):
    routes = []
    for kids in tree.child_index(level):
        if len(kids) == 1:
            routes.append(None)
        else:
            routes.append(np.argmax(lifted_child[list(kids)], axis=0))
    return routes


class _Forward:
    """One evaluation of the loss, keeping what the backward pass and tie guard need."""

    def __init__(self, leaf, g, tree: SemanticTree, weights: LossWeights, need_grad: bool = True):
        y = leaf.data if isinstance(leaf, LogitField) else np.asarray(leaf)
        if isinstance(leaf, LogitField) and leaf.channel_map != tree.channel_map(tree.depth):
            raise ValueError("channel-map mismatch between logits and tree leaves")
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != len(tree.leaf_classes) + 1:
            raise ValueError("channel-map mismatch between logits and tree leaves")
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite logits")
        labels = _labels_array(g)
        if labels.shape != y.shape[1:]:
            raise ValueError(f"labels {labels.shape} vs logits {y.shape[1:]}")
        L = tree.depth
        self.tree, self.weights, self.shape = tree, weights, y.shape
        self.factors = weights.level_factors(L)

        lifted = [y]
        routes = {}
        for level in range(L - 1, 0, -1):
            child = lifted[0]
            routes[level] = _route_indices(tree, child, level)
            groups = tree.child_index(level)
            up = np.empty((len(groups),) + child.shape[1:])
            for c, kids in enumerate(groups):
                r = routes[level][c]
                up[c] = child[kids[0]] if r is None else np.take_along_axis(
                    child[list(kids)], r[None], axis=0
                )[0]
            lifted.insert(0, up)
        self.routes = routes
        self.probs = [softmax(z) for z in lifted]

        leaf_index = _channel_index(labels, tree.channel_map(L))
        self.targets = []
        for level in range(1, L + 1):
            gl = tree.project_array(labels, level)
            self.targets.append(_channel_index(gl, tree.channel_map(level)))
        self.leaf_index = leaf_index

        n = labels.size
        total = 0.0
        self.grads_y = [None] * L
        self.clamp_masks = []
        for i in range(L):
            w = self.factors[i]
            p, gi = self.probs[i], self.targets[i]
            pt = np.take_along_axis(p, gi[None], axis=0)[0]
            clamped = pt < CE_CLAMP
            self.clamp_masks.append(clamped)
            if w == 0:
                continue
            ce = float(np.mean(-np.log(np.clip(pt, CE_CLAMP, 1.0))))
            dice = soft_dice_level(p, gi, weights.epsilon)
            total += w * (weights.lambda_ce * ce + weights.lambda_dice * dice)
            if need_grad:
                gy = np.zeros_like(p)
                if weights.lambda_ce:
                    onehot = np.zeros_like(p)
                    np.put_along_axis(onehot, gi[None], 1.0, axis=0)
                    gce = (p - onehot) / n
                    gce[:, clamped] = 0.0
                    gy += weights.lambda_ce * gce
                if weights.lambda_dice:
                    gp = self._dice_grad_p(p, gi, weights.epsilon)
                    gy += weights.lambda_dice * _softmax_back(p, gp)
                self.grads_y[i] = w * gy

        self.skeleton = None
        if weights.lambda_cbdice:
            term, g_vp, skp = _cbdice(self.probs[-1], leaf_index, weights, need_grad=need_grad)
            self.skeleton = skp
            total += weights.lambda_cbdice * term
            if need_grad:
                gp = np.zeros_like(self.probs[-1])
                gp[0] = -weights.lambda_cbdice * g_vp
                gy = _softmax_back(self.probs[-1], gp)
                self.grads_y[-1] = gy if self.grads_y[-1] is None else self.grads_y[-1] + gy
        self.loss = total

    @staticmethod
    def _dice_grad_p(p, gi, eps):
        C = p.shape[0]
        K = C - 1
        gp = np.zeros_like(p)
        for c in range(1, C):
            gc = (gi == c).astype(np.float64)
            inter = float(np.sum(p[c] * gc))
            D = float(p[c].sum()) + float(gc.sum()) + eps
            gp[c] = -(2.0 * gc * D - (2.0 * inter + eps)) / (D * D) / K
        return gp

    def gradient(self) -> np.ndarray:
        L = self.tree.depth
        gys = [np.zeros(self.probs[i].shape) if g is None else g.copy() for i, g in enumerate(self.grads_y)]
        for level in range(1, L):
            upper, lower = gys[level - 1], gys[level]
            for c, kids in enumerate(self.tree.child_index(level)):
                r = self.routes[level][c]
                if r is None:
                    lower[kids[0]] += upper[c]
                else:
                    for j, k in enumerate(kids):
                        lower[k] += np.where(r == j, upper[c], 0.0)
        return gys[-1]

    def signature(self) -> list[np.ndarray]:
        """Every discrete routing decision; a change means a kink lies between two inputs."""
        sig = [r for lv in sorted(self.routes) for r in self.routes[lv] if r is not None]
        sig.extend(self.clamp_masks)
        if self.skeleton is not None:
            sig.extend(self.skeleton.signature())
        return sig


def _softmax_back(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - np.sum(p * gp, axis=0, keepdims=True))


def total_loss(leaf, g, tree: SemanticTree, weights: LossWeights | None = None) -> float:
    return _Forward(leaf, g, tree, weights or LossWeights(), need_grad=False).loss


def loss_and_gradient(leaf, g, tree: SemanticTree, weights: LossWeights | None = None):
    fw = _Forward(leaf, g, tree, weights or LossWeights())
    return fw.loss, fw.gradient()


def loss_gradient(leaf, g, tree: SemanticTree, weights: LossWeights | None = None) -> np.ndarray:
    return loss_and_gradient(leaf, g, tree, weights)[1]


# -- finite differences ------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped_ties: int
    worst_coord: tuple[int, ...] | None = None
    errors: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "skipped_ties": self.skipped_ties,
            "worst_coord": None if self.worst_coord is None else list(self.worst_coord),
        }


def _same_signature(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    leaf,
    g,
    tree: SemanticTree,
    weights: LossWeights | None = None,
    h: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheck:
    """Central differences on a random coordinate subset versus :func:`loss_gradient`.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Coordinates whose
    +-h perturbation changes any max/min routing, relu mask or CE clamp are
    skipped (the loss has a kink there) and replaced by fresh draws.
    """
    if not h > 0 or not math.isfinite(h):
        raise ValueError(f"invalid step h={h}")
    weights = weights or LossWeights()
    y = np.array(leaf.data if isinstance(leaf, LogitField) else leaf, dtype=np.float64)
    base = _Forward(y, g, tree, weights)
    grad = base.gradient()
    base_sig = base.signature()
    rng = np.random.default_rng(seed)
    order = rng.permutation(y.size)
    worst, worst_coord, errors, skipped = 0.0, None, [], 0
    for flat in order:
        if len(errors) >= n_coords:
            break
        coord = np.unravel_index(flat, y.shape)
        yp, ym = y.copy(), y.copy()
        yp[coord] += h
        ym[coord] -= h
        fp = _Forward(yp, g, tree, weights, need_grad=False)
        fm = _Forward(ym, g, tree, weights, need_grad=False)
        if not (_same_signature(fp.signature(), base_sig) and _same_signature(fm.signature(), base_sig)):
            skipped += 1
            continue
        num = (fp.loss - fm.loss) / (2.0 * h)
        ana = grad[coord]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        errors.append(err)
        if err >= worst:
            worst, worst_coord = err, tuple(int(c) for c in coord)
    return GradCheck(worst, len(errors), skipped, worst_coord, errors)
