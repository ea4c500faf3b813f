import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierseg.grid import LabelVolume
from hierseg.tree import (
    HierarchyError,
    Node,
    SemanticTree,
    aorta_hierarchy,
    aorta_hierarchy_text,
    load_hierarchy,
    normalize_depths,
    parse_hierarchy,
    project_labels,
)

from _helpers import AORTA, ARTERY, BRANCH, chain_tree, random_tree


def test_chain_levels():
    t = chain_tree()
    assert t.depth == 2
    assert t.level_classes(1) == (ARTERY,)
    assert t.level_classes(2) == (AORTA, BRANCH)
    assert t.channel_map(2) == (0, AORTA, BRANCH)


def test_shipped_aorta_hierarchy():
    t = aorta_hierarchy()
    assert len(t.leaf_classes) == 23
    assert t.leaf_classes == tuple(range(1, 24))
    assert t.depth == 4
    assert t.summary()["level_sizes"] == [1, 4, 10, 23]
    # every level partitions the leaves
    for l in range(1, t.depth + 1):
        covered = sorted(x for v in t.level_nodes(l) for x in t.descendant_leaves(v))
        assert covered == list(range(1, 24))


def test_shipped_text_roundtrips(tmp_path):
    p = tmp_path / "aorta.json"
    p.write_text(aorta_hierarchy_text())
    assert load_hierarchy(p) == aorta_hierarchy()


@pytest.mark.parametrize(
    "doc, msg",
    [
        ({"classes": [{"id": 3, "name": "x", "parent": 3}]}, "cycle"),
        ({"classes": [{"id": 1, "name": "a", "parent": 2}, {"id": 2, "name": "b", "parent": 1}]}, "cycle"),
        ({"classes": []}, "empty hierarchy"),
        ({"classes": [{"id": 0, "name": "bg", "parent": None}]}, "background"),
        ({"classes": [{"id": 1, "name": "a", "parent": None}, {"id": 1, "name": "b", "parent": None}]}, "duplicate"),
        ({"classes": [{"id": 1, "name": "a", "parent": 9}]}, "dangling"),
        ({"nodes": []}, "classes"),
        ({"classes": [{"id": "1", "name": "a"}]}, "integer"),
    ],
)
def test_invalid_documents(doc, msg):
    with pytest.raises(HierarchyError, match=msg):
        parse_hierarchy(doc)


def test_cycle_error_names_node():
    with pytest.raises(HierarchyError) as err:
        parse_hierarchy(json.dumps({"classes": [{"id": 5, "name": "x", "parent": 5}]}))
    assert err.value.node_id == 5


def test_normalize_inserts_aliases():
    # leaf 1 at depth 1, leaf 2 at depth 3
    nodes = [Node(1, "shallow", None), Node(10, "r", None), Node(11, "m", 10), Node(2, "deep", 11)]
    t = normalize_depths(SemanticTree(nodes))
    aliases = [n for n in t.nodes.values() if n.alias_of == 1]
    assert len(aliases) == 2
    assert t.is_normalized and t.depth == 3
    assert t.level_classes(3) == (1, 2)
    assert t.ancestor_at_level(1, 3) == 1


def test_normalize_uniform_is_identity():
    t = chain_tree()
    assert normalize_depths(t) is t


def test_subclasses():
    t = chain_tree()
    assert t.subclasses(ARTERY) == (AORTA, BRANCH)
    assert t.subclasses(AORTA) == ()
    with pytest.raises(HierarchyError, match="background has no tree node"):
        t.subclasses(0)


def test_ancestor_at_level():
    t = chain_tree()
    assert t.ancestor_at_level(AORTA, 1) == ARTERY
    assert t.ancestor_at_level(0, 1) == 0
    assert t.ancestor_at_level(0, 2) == 0
    assert t.ancestor_at_level(BRANCH, 2) == BRANCH
    with pytest.raises(HierarchyError):
        t.ancestor_at_level(AORTA, 3)


def test_project_labels_chain():
    t = chain_tree()
    v = LabelVolume(np.array([AORTA, BRANCH, 0]).reshape(3, 1, 1), (0.5, 1.0, 2.0))
    out = project_labels(t, v, 1)
    assert out.data.ravel().tolist() == [ARTERY, ARTERY, 0]
    assert out.spacing == v.spacing
    assert project_labels(t, v, 2) == v


def test_project_labels_unknown_leaf():
    t = chain_tree()
    with pytest.raises(HierarchyError, match="not a known leaf"):
        project_labels(t, LabelVolume(np.full((2, 2, 2), 7)), 1)
    with pytest.raises(HierarchyError):
        t.project_array(np.full((1, 1, 1), ARTERY), 1)  # inner node is not a voxel value


def test_project_full_aorta_to_level1_is_foreground_mask():
    t = aorta_hierarchy()
    rng = np.random.default_rng(3)
    arr = rng.integers(0, 24, size=(6, 6, 6))
    out = project_labels(t, LabelVolume(arr), 1).data
    # per-voxel oracle: walk parent links
    def root(v):
        while t.parent(v) is not None:
            v = t.parent(v)
        return v
    expected = np.vectorize(lambda v: 0 if v == 0 else root(v))(arr)
    assert np.array_equal(out, expected)
    assert np.array_equal(out != 0, arr != 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tree_properties(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    L = t.depth
    for l in range(1, L):
        kids = [set(t.subclasses(v)) for v in t.level_nodes(l)]
        union = set().union(*kids)
        assert union == set(t.level_nodes(l + 1))
        assert sum(len(k) for k in kids) == len(union)
    leaves = np.array((0,) + t.leaf_classes).reshape(-1, 1, 1)
    for l in range(1, L + 1):
        direct = t.project_array(leaves, l)
        # idempotence across levels
        assert np.array_equal(t.project_array(t.project_array(leaves, L), l), direct)
        assert set(direct.ravel()) - {0} <= set(t.level_classes(l))
    # chain consistency: ancestors at successive levels lie on one root-to-leaf path
    for u in t.leaf_classes:
        for l in range(1, L):
            up = t.ancestor_at_level(u, l)
            down = t.ancestor_at_level(u, l + 1)
            assert u in t.descendant_leaves(up)
            assert set(t.descendant_leaves(down)) <= set(t.descendant_leaves(up))


def test_child_index_background_maps_to_background():
    t = aorta_hierarchy()
    for l in range(1, t.depth):
        ci = t.child_index(l)
        assert ci[0] == (0,)
        assert len(ci) == len(t.channel_map(l))
        flat = sorted(c for kids in ci[1:] for c in kids)
        assert flat == list(range(1, len(t.channel_map(l + 1))))
