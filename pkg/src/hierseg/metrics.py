"""Hard evaluation metrics: Dice, NSD, centerline scores and per-case reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import LabelVolume
from .skeleton import skeletonize
from .tree import SemanticTree

_FACE = ndimage.generate_binary_structure(3, 1)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    return a, b


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return _ratio(2 * int(np.count_nonzero(p & r)), int(p.sum()) + int(r.sum()))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face neighbour outside the mask (the volume border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_FACE, border_value=0)


def _distance_to(target: np.ndarray, spacing) -> np.ndarray:
    if not target.any():
        return np.full(target.shape, np.inf)
    return ndimage.distance_transform_edt(~target, sampling=spacing)


def nsd(pred, ref, spacing=(1.0, 1.0, 1.0), tol_mm: float = 2.0, ref_spacing=None) -> float:
    """Normalized surface distance: share of both boundaries lying within ``tol_mm`` of the other."""
    p, r = _pair(pred, ref)
    if ref_spacing is not None and tuple(map(float, ref_spacing)) != tuple(map(float, spacing)):
        raise ValueError("spacing mismatch")
    bp, br = boundary(p), boundary(r)
    n = int(bp.sum()) + int(br.sum())
    if n == 0:
        return 1.0
    dp = _distance_to(br, spacing)[bp]
    dr = _distance_to(bp, spacing)[br]
    return (int(np.count_nonzero(dp <= tol_mm)) + int(np.count_nonzero(dr <= tol_mm))) / n


# -- centerline scores -------------------------------------------------------


def _q_sets(skel_a, vol_a, skel_b, vol_b):
    """Voxel sets for the precision of ``a`` against ``b``.

    Each Q set is the voxel set of the structure its subscript names
    (s = skeleton, v = volume); composite subscripts take the union of
    their parts, and U is the whole grid.  Swap here to change semantics.
    """
    q_sa = skel_a
    q_vb = vol_b
    q_sava = skel_a | vol_a
    q_sbvb = skel_b | vol_b
    outside_sb = ~skel_b
    return q_sa, q_vb, q_sava, q_sbvb, outside_sb


def _topo_ratio(skel_a, vol_a, skel_b, vol_b) -> float:
    if (skel_a & ~vol_a).any() or (skel_b & ~vol_b).any():
        raise ValueError("skeleton is not contained in its volume")
    q_sa, q_vb, q_sava, q_sbvb, outside_sb = _q_sets(skel_a, vol_a, skel_b, vol_b)
    num = int(np.count_nonzero(q_sa & q_vb))
    den = int(np.count_nonzero(q_sa & q_sava & outside_sb)) + int(np.count_nonzero(q_sa & q_sbvb))
    return _ratio(num, den)


def tprec(S_P, S_L, V_L, V_P) -> float:
    """Topological precision of the prediction skeleton against the label."""
    S_P, S_L = _pair(S_P, S_L)
    V_L, V_P = _pair(V_L, V_P)
    _pair(S_P, V_L)
    return _topo_ratio(S_P, V_P, S_L, V_L)


def tsens(S_L, S_P, V_P, V_L) -> float:
    """Topological sensitivity: the same ratio with prediction and label swapped."""
    S_L, S_P = _pair(S_L, S_P)
    V_P, V_L = _pair(V_P, V_L)
    _pair(S_L, V_P)
    return _topo_ratio(S_L, V_L, S_P, V_P)


def _f1(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


@dataclass(frozen=True)
class CenterlineScores:
    tprec: float
    tsens: float
    cl_x_dice: float
    cl_tprec: float
    cl_tsens: float
    cl_dice: float


def centerline_scores(V_P, V_L) -> CenterlineScores:
    """cl-X-Dice and classic clDice for one binary pair (skeletons computed here)."""
    V_P, V_L = _pair(V_P, V_L)
    S_P, S_L = skeletonize(V_P), skeletonize(V_L)
    tp, ts = tprec(S_P, S_L, V_L, V_P), tsens(S_L, S_P, V_P, V_L)
    ctp = _ratio(int(np.count_nonzero(S_P & V_L)), int(S_P.sum()))
    cts = _ratio(int(np.count_nonzero(S_L & V_P)), int(S_L.sum()))
    return CenterlineScores(tp, ts, _f1(tp, ts), ctp, cts, _f1(ctp, cts))


def cl_x_dice(V_P, V_L) -> float:
    return centerline_scores(V_P, V_L).cl_x_dice


def cl_dice(V_P, V_L) -> float:
    return centerline_scores(V_P, V_L).cl_dice


# -- per-case report ---------------------------------------------------------


@dataclass
class MetricReport:
    case_id: str
    tol_mm: float
    dsc: dict[int, float | None] = field(default_factory=dict)
    nsd: dict[int, float | None] = field(default_factory=dict)
    mean_dsc: float = 0.0
    mean_nsd: float = 0.0
    cl_dice: float = 0.0
    cl_x_dice: float = 0.0
    tprec: float = 0.0
    tsens: float = 0.0

    def summary_line(self) -> str:
        return f"DSC={self.mean_dsc:.3f} NSD={self.mean_nsd:.3f}"

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "tol_mm": self.tol_mm,
            "per_class": {
                str(c): {"dsc": self.dsc[c], "nsd": self.nsd[c]} for c in sorted(self.dsc)
            },
            "mean_dsc": self.mean_dsc,
            "mean_nsd": self.mean_nsd,
            "cl_dice": self.cl_dice,
            "cl_x_dice": self.cl_x_dice,
            "tprec": self.tprec,
            "tsens": self.tsens,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        per = doc["per_class"]
        return cls(
            case_id=doc["case_id"],
            tol_mm=doc["tol_mm"],
            dsc={int(c): v["dsc"] for c, v in per.items()},
            nsd={int(c): v["nsd"] for c, v in per.items()},
            mean_dsc=doc["mean_dsc"],
            mean_nsd=doc["mean_nsd"],
            cl_dice=doc["cl_dice"],
            cl_x_dice=doc["cl_x_dice"],
            tprec=doc["tprec"],
            tsens=doc["tsens"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_case(
    pred: LabelVolume, ref: LabelVolume, tree: SemanticTree, tol_mm: float = 2.0, case_id: str = "case"
) -> MetricReport:
    """Per-leaf DSC/NSD plus foreground centerline scores.

    Classes absent from both volumes get ``None`` and are left out of the means.
    """
    if pred.dims != ref.dims:
        raise ValueError(f"dim mismatch: {pred.dims} vs {ref.dims}")
    if pred.spacing != ref.spacing:
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {ref.spacing}")
    leaves = set(tree.leaf_classes)
    for vol in (pred, ref):
        extra = set(np.unique(vol.data).tolist()) - leaves - {0}
        if extra:
            raise ValueError(f"unknown label id(s) {sorted(extra)}")
    rep = MetricReport(case_id=case_id, tol_mm=float(tol_mm))
    for c in tree.leaf_classes:
        p, r = pred.data == c, ref.data == c
        if not p.any() and not r.any():
            rep.dsc[c] = rep.nsd[c] = None
            continue
        rep.dsc[c] = dice(p, r)
        rep.nsd[c] = nsd(p, r, pred.spacing, tol_mm)
    scored = [c for c in rep.dsc if rep.dsc[c] is not None]
    rep.mean_dsc = float(np.mean([rep.dsc[c] for c in scored])) if scored else 1.0
    rep.mean_nsd = float(np.mean([rep.nsd[c] for c in scored])) if scored else 1.0
    cs = centerline_scores(pred.data != 0, ref.data != 0)
    rep.cl_dice, rep.cl_x_dice, rep.tprec, rep.tsens = cs.cl_dice, cs.cl_x_dice, cs.tprec, cs.tsens
    return rep
