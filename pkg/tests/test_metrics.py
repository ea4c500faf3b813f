import numpy as np
import pytest

from hierseg.grid import LabelVolume
from hierseg.metrics import (
    MetricReport,
    centerline_scores,
    cl_dice,
    cl_x_dice,
    dice,
    evaluate_case,
    nsd,
    tprec,
    tsens,
)
from hierseg.phantom import PhantomSpec, generate_vessel_phantom
from hierseg.skeleton import skeletonize
from hierseg.tree import aorta_hierarchy

from _oracles import dice_oracle, nsd_oracle, topo_oracle

def test_dice_examples():
    a = np.zeros((4, 1, 1), bool)
    b = np.zeros((4, 1, 1), bool)
    a[[0, 1]] = True
    b[[1, 2, 3]] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == pytest.approx(0.4)
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(ValueError, match="dim mismatch"):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_dice_and_topology_against_set_oracles():
    rng = np.random.default_rng(0)
    for _ in range(300):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
        Vp = rng.random(shape) < rng.uniform(0.1, 0.9)
        Vl = rng.random(shape) < rng.uniform(0.1, 0.9)
        Sp = Vp & (rng.random(shape) < 0.5)
        Sl = Vl & (rng.random(shape) < 0.5)
        assert dice(Vp, Vl) == dice_oracle(Vp, Vl)
        assert tprec(Sp, Sl, Vl, Vp) == topo_oracle(Sp, Vp, Sl, Vl)
        assert tsens(Sl, Sp, Vp, Vl) == topo_oracle(Sl, Vl, Sp, Vp)


def test_tprec_perfect_and_disjoint():
    V = np.zeros((5, 5, 5), bool)
    V[1:4, 1:4, 1:4] = True
    S = skeletonize(V)
    assert tprec(S, S, V, V) == 1.0 and tsens(S, S, V, V) == 1.0
    other = np.zeros_like(V)
    other[4, 4, 4] = True
    assert tprec(other, S, V, other) == 0.0


def test_skeleton_outside_volume_rejected():
    V = np.zeros((3, 3, 3), bool)
    S = np.zeros_like(V)
    S[0, 0, 0] = True
    with pytest.raises(ValueError, match="not contained"):
        tprec(S, S, V, V)


def test_nsd_examples():
    a = np.zeros((8, 8, 8), bool)
    a[2:5, 2:5, 2:5] = True
    assert nsd(a, a) == 1.0
    far_a = np.zeros((30, 8, 8), bool)
    far_b = np.zeros((30, 8, 8), bool)
    far_a[1:4, 2:5, 2:5] = True
    far_b[24:27, 2:5, 2:5] = True
    assert nsd(far_a, far_b, tol_mm=2.0) == 0.0
    shifted = np.roll(a, 1, axis=0)
    assert nsd(a, shifted, tol_mm=2.0) == 1.0
    assert nsd(np.zeros((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0
    with pytest.raises(ValueError, match="spacing mismatch"):
        nsd(a, a, (1, 1, 1), 2.0, ref_spacing=(2, 1, 1))


@pytest.mark.parametrize("tol", [1.0, 2.0])
def test_nsd_against_pairwise_oracle(tol):
    rng = np.random.default_rng(int(tol))
    for _ in range(40):
        shape = tuple(int(s) for s in rng.integers(2, 7, size=3))
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5], size=3))
        p = rng.random(shape) < 0.4
        r = rng.random(shape) < 0.4
        assert nsd(p, r, spacing, tol) == pytest.approx(nsd_oracle(p, r, spacing, tol), abs=1e-15)


def test_centerline_identity_and_miss():
    V = np.zeros((7, 7, 12), bool)
    V[2:5, 2:5, 1:11] = True
    assert cl_x_dice(V, V) == 1.0 and cl_dice(V, V) == 1.0
    assert cl_x_dice(np.zeros_like(V), V) == 0.0


def test_gap_penalised_harder_than_dice():
    intact = np.zeros((9, 9, 21), bool)
    intact[2:7, 2:7, 1:20] = True
    gap = intact.copy()
    gap[:, :, 10] = False
    s = centerline_scores(gap, intact)
    assert s.cl_x_dice < dice(gap, intact)


def _phantom():
    spec = PhantomSpec(dims=(32, 32, 32), trunk_radius=4, branch_count=4, branch_radius=(1, 2), seed=7)
    return generate_vessel_phantom(spec, aorta_hierarchy())


def test_evaluate_case_identity_and_background():
    t = aorta_hierarchy()
    ref = _phantom()
    rep = evaluate_case(ref, ref, t)
    present = [c for c in t.leaf_classes if rep.dsc[c] is not None]
    assert len(present) == 5
    assert all(rep.dsc[c] == 1.0 and rep.nsd[c] == 1.0 for c in present)
    assert rep.summary_line() == "DSC=1.000 NSD=1.000"
    empty = LabelVolume(np.zeros(ref.dims, dtype=np.uint16))
    miss = evaluate_case(empty, ref, t)
    assert all(miss.dsc[c] == 0.0 for c in present)
    with pytest.raises(ValueError, match="unknown label"):
        evaluate_case(LabelVolume(np.full(ref.dims, 99)), ref, t)


def test_report_roundtrip(tmp_path):
    t = aorta_hierarchy()
    ref = _phantom()
    pred = LabelVolume(np.roll(ref.data, 1, axis=2))
    rep = evaluate_case(pred, ref, t, case_id="c1")
    p = tmp_path / "r.json"
    rep.save(p)
    back = MetricReport.load(p)
    assert back == rep
    assert back.dumps() == p.read_text()
