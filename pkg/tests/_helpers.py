"""Shared builders for tests: small trees and seeded random instances."""

from __future__ import annotations

import numpy as np

from hierseg.tree import SemanticTree, parse_hierarchy

ARTERY, AORTA, BRANCH = 10, 1, 2


def chain_tree() -> SemanticTree:
    """Artery -> {Aorta, Branch}."""
    return parse_hierarchy(
        {
            "classes": [
                {"id": ARTERY, "name": "Artery", "parent": None},
                {"id": AORTA, "name": "Aorta", "parent": ARTERY},
                {"id": BRANCH, "name": "Branch", "parent": ARTERY},
            ]
        }
    )


def flat_tree(n: int) -> SemanticTree:
    return parse_hierarchy({"classes": [{"id": i, "name": f"c{i}", "parent": None} for i in range(1, n + 1)]})


def random_tree(rng: np.random.Generator, max_depth: int = 4, max_leaves: int = 23) -> SemanticTree:
    """Random hierarchy with uneven leaf depths.  Leaves get ids 1..n, inner nodes 100+."""
    depth = int(rng.integers(1, max_depth + 1))
    n_leaves = int(rng.integers(2, max_leaves + 1))
    classes = []
    next_inner = 100
    inner: list[tuple[int, int]] = []
    n_roots = int(rng.integers(1, 4)) if depth > 1 else 0
    for _ in range(n_roots):
        classes.append({"id": next_inner, "name": f"n{next_inner}", "parent": None})
        inner.append((next_inner, 1))
        next_inner += 1
    # grow inner nodes down to depth-1
    for d in range(2, depth):
        parents = [nid for nid, nd in inner if nd == d - 1]
        for p in parents:
            for _ in range(int(rng.integers(1, 3))):
                classes.append({"id": next_inner, "name": f"n{next_inner}", "parent": p})
                inner.append((next_inner, d))
                next_inner += 1
    for leaf in range(1, n_leaves + 1):
        if not inner:
            parent = None
        else:
            parent = inner[int(rng.integers(0, len(inner)))][0]
        classes.append({"id": leaf, "name": f"leaf{leaf}", "parent": parent})
    # childless inner nodes would become extra leaves; prune them so leaves stay 1..n
    parents = {c["parent"] for c in classes}
    changed = True
    while changed:
        changed = False
        keep = []
        for c in classes:
            if c["id"] >= 100 and c["id"] not in parents:
                changed = True
                continue
            keep.append(c)
        classes = keep
        parents = {c["parent"] for c in classes}
    return parse_hierarchy({"classes": classes})


def random_labels(rng: np.random.Generator, tree: SemanticTree, shape) -> np.ndarray:
    return rng.choice(np.array(tree.channel_map(tree.depth)), size=shape).astype(np.int64)


def random_logits(rng: np.random.Generator, tree: SemanticTree, shape, scale: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, scale, size=(len(tree.channel_map(tree.depth)),) + tuple(shape))
