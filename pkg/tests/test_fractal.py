import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierseg.fractal import (
    ProbabilityPyramid,
    check_constraints,
    decode,
    fractal_softmax,
    lift_logits,
    load_pyramid,
    save_pyramid,
    softmax,
)
from hierseg.grid import LogitField
from hierseg.tree import aorta_hierarchy

from _helpers import AORTA, ARTERY, BRANCH, chain_tree, flat_tree, random_logits, random_tree


def _chain_logits():
    return np.array([0.0, 2.0, 1.0]).reshape(3, 1, 1, 1)


def test_lift_chain():
    y1, y2 = lift_logits(chain_tree(), _chain_logits())
    assert y1.ravel().tolist() == [0.0, 2.0]
    assert y2.ravel().tolist() == [0.0, 2.0, 1.0]


def test_single_level_lift_is_identity():
    y = np.random.default_rng(0).normal(size=(4, 2, 2, 2))
    (out,) = lift_logits(flat_tree(3), y)
    assert np.array_equal(out, y)


def test_lift_matches_descendant_max_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = random_tree(rng, max_depth=3)
        y = random_logits(rng, t, (2, 2, 2))
        lifted = lift_logits(t, y)
        leaf_pos = {c: i for i, c in enumerate(t.channel_map(t.depth))}
        for l in range(1, t.depth + 1):
            for ch, v in enumerate(t.level_nodes(l), start=1):
                idx = [leaf_pos[u] for u in t.descendant_leaves(v)]
                expect = np.max(y[idx], axis=0)
                assert np.array_equal(lifted[l - 1][ch], expect)
            assert np.array_equal(lifted[l - 1][0], y[0])


def test_chain_probabilities_by_hand():
    pyr = fractal_softmax(chain_tree(), _chain_logits())
    e = [1.0, math.exp(2.0), math.exp(1.0)]
    s2 = sum(e)
    assert pyr.level(2).ravel() == pytest.approx([x / s2 for x in e], abs=1e-12)
    assert pyr.level(2).ravel() == pytest.approx([0.0900, 0.6652, 0.2447], abs=5e-5)
    assert pyr.level(1).ravel() == pytest.approx([0.1192, 0.8808], abs=5e-5)


def test_uniform_leaf_logits_give_uniform_leaf_probs():
    t = aorta_hierarchy()
    pyr = fractal_softmax(t, np.zeros((24, 2, 2, 2)))
    assert np.allclose(pyr.level(4), 1 / 24, atol=1e-15)


def test_single_level_equals_plain_softmax():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(6, 3, 3, 3))
    pyr = fractal_softmax(flat_tree(5), y)
    e = np.exp(y)
    assert np.max(np.abs(pyr.level(1) - e / e.sum(0))) < 1e-12


def test_channel_map_mismatch():
    t = chain_tree()
    with pytest.raises(ValueError, match="channel-map mismatch"):
        fractal_softmax(t, LogitField(np.zeros((3, 1, 1, 1)), (0, 1, 3)))
    with pytest.raises(ValueError, match="channel-map mismatch"):
        fractal_softmax(t, np.zeros((4, 1, 1, 1)))
    with pytest.raises(ValueError, match="non-finite"):
        fractal_softmax(t, np.full((3, 1, 1, 1), np.inf))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_constraints_hold(seed, scale):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    y = random_logits(rng, t, (3, 2, 2), scale)
    pyr = fractal_softmax(t, y)
    rep = check_constraints(pyr, t, 1e-9)
    assert rep.ok, rep.to_json()
    for p in pyr.probs:
        assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_constructed_parent_child_violation():
    t = chain_tree()
    p1 = np.array([0.5, 0.5]).reshape(2, 1, 1, 1)
    p2 = np.array([0.1, 0.9, 0.0]).reshape(3, 1, 1, 1)
    pyr = ProbabilityPyramid((p1, p2), (), (t.channel_map(1), t.channel_map(2)))
    rep = check_constraints(pyr, t, 0.0)
    assert rep.positive.count == 1
    assert rep.positive.worst == pytest.approx(0.4)
    assert not rep.ok


def test_uniform_pyramid_boundary_case_is_not_exclusive_violation():
    t = chain_tree()
    p1 = np.full((2, 1, 1, 1), 0.5)
    p2 = np.array([0.5, 0.25, 0.25]).reshape(3, 1, 1, 1)
    rep = check_constraints(ProbabilityPyramid((p1, p2), (), (t.channel_map(1), t.channel_map(2))), t, 0.0)
    assert rep.exclusive.count == 0


def test_decode_chain():
    levels = decode(fractal_softmax(chain_tree(), _chain_logits()), chain_tree())
    assert levels[0].data.item() == ARTERY
    assert levels[1].data.item() == AORTA


def test_decode_background_dominant():
    t = aorta_hierarchy()
    y = np.zeros((24, 2, 2, 2))
    y[0] = 10.0
    assert all(not v.data.any() for v in decode(fractal_softmax(t, y), t))


def test_projected_leaf_decode_equals_level_decode():
    rng = np.random.default_rng(7)
    for _ in range(30):
        t = random_tree(rng)
        y = random_logits(rng, t, (3, 3, 3))
        levels = decode(fractal_softmax(t, y), t)
        leaf = levels[-1].data
        for l in range(1, t.depth + 1):
            assert np.array_equal(levels[l - 1].data, t.project_array(leaf, l))


def test_branch_wins_when_its_logit_is_largest():
    y = np.array([0.0, 1.0, 3.0]).reshape(3, 1, 1, 1)
    levels = decode(fractal_softmax(chain_tree(), y), chain_tree())
    assert levels[1].data.item() == BRANCH


def test_pyramid_roundtrip_and_check(tmp_path):
    t = aorta_hierarchy()
    y = random_logits(np.random.default_rng(8), t, (3, 3, 3))
    pyr = fractal_softmax(t, y)
    save_pyramid(pyr, tmp_path / "p")
    back = load_pyramid(tmp_path / "p", t.depth)
    for a, b in zip(pyr.probs, back.probs):
        assert np.allclose(a, b, atol=1e-7)
    # float32 storage loses the 1e-9 margin; the saved pyramid passes at 1e-6
    assert check_constraints(back, t, 1e-6).ok


def test_softmax_is_stable_for_large_logits():
    p = softmax(np.array([1000.0, 999.0]).reshape(2, 1))
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1 / (1 + math.exp(-1)))
