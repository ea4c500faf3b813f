"""Semantic class tree: parsing, depth normalization and level queries.

Node ids are positive integers; id 0 is background and never a tree node.
Background is treated as a virtual class present at every level.

Shallow leaves are padded down to the deepest level with pass-through alias
nodes (same name, fresh ids).  Aliases are an internal device: everything
public (label volumes, channel maps, level class lists) speaks in *label ids*,
where an alias resolves to the original node it stands in for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .grid import LabelVolume

BACKGROUND = 0


class HierarchyError(ValueError):
    """Invalid hierarchy document or query; ``node_id`` names the culprit."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message if node_id is None else f"{message} (id {node_id})")
        self.node_id = node_id


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    parent: int | None
    alias_of: int | None = None

    @property
    def label(self) -> int:
        return self.id if self.alias_of is None else self.alias_of


class SemanticTree:
    """Immutable, depth-normalized class hierarchy.

    Levels are numbered 1 (coarsest) to ``depth`` (leaves).  Within a level
    classes are ordered by ascending label id; channel 0 is always background.
    """

    def __init__(self, nodes: Iterable[Node]):
        nodes = list(nodes)
        if not nodes:
            raise HierarchyError("empty hierarchy")
        by_id: dict[int, Node] = {}
        for n in nodes:
            if n.id == BACKGROUND:
                raise HierarchyError("id 0 is reserved for background", 0)
            if n.id < 0:
                raise HierarchyError("node ids must be positive", n.id)
            if n.id in by_id:
                raise HierarchyError("duplicate id", n.id)
            by_id[n.id] = n
        for n in nodes:
            if n.parent is not None and n.parent not in by_id:
                raise HierarchyError(f"dangling parent reference {n.parent}", n.id)

        depth_of: dict[int, int] = {}
        for n in nodes:
            chain = []
            cur: int | None = n.id
            while cur is not None and cur not in depth_of:
                if cur in chain:
                    raise HierarchyError("cycle in parent links", cur)
                chain.append(cur)
                cur = by_id[cur].parent
            d = 0 if cur is None else depth_of[cur]
            for nid in reversed(chain):
                d += 1
                depth_of[nid] = d

        children: dict[int, list[int]] = {nid: [] for nid in by_id}
        for n in nodes:
            if n.parent is not None:
                children[n.parent].append(n.id)
        for kids in children.values():
            kids.sort()

        self._nodes = MappingProxyType(by_id)
        self._children = MappingProxyType({k: tuple(v) for k, v in children.items()})
        self._depth_of = MappingProxyType(depth_of)
        self.depth = max(depth_of.values())

        levels: list[list[int]] = [[] for _ in range(self.depth)]
        for nid, d in depth_of.items():
            levels[d - 1].append(nid)
        self._levels = tuple(
            tuple(sorted(lv, key=lambda i: (by_id[i].label, i))) for lv in levels
        )

        # label id -> leaf node; original shallow leaves resolve to their deepest alias
        self._leaf_node: dict[int, int] = {}
        for nid in self._levels[-1]:
            self._leaf_node[by_id[nid].label] = nid
        self._lookup_cache: dict[int, np.ndarray] = {}

    # -- structure ---------------------------------------------------------

    @property
    def nodes(self) -> Mapping[int, Node]:
        return self._nodes

    @property
    def is_normalized(self) -> bool:
        return all(
            self._depth_of[nid] == self.depth
            for nid, kids in self._children.items()
            if not kids
        )

    def node_depth(self, v: int) -> int:
        self._check_node(v)
        return self._depth_of[v]

    def level_nodes(self, level: int) -> tuple[int, ...]:
        """Node ids (aliases included) at ``level``, in channel order."""
        self._check_level(level)
        return self._levels[level - 1]

    def level_classes(self, level: int) -> tuple[int, ...]:
        """Label ids of the foreground classes at ``level``, in channel order."""
        return tuple(self._nodes[n].label for n in self.level_nodes(level))

    def channel_map(self, level: int) -> tuple[int, ...]:
        return (BACKGROUND,) + self.level_classes(level)

    @property
    def leaf_classes(self) -> tuple[int, ...]:
        return self.level_classes(self.depth)

    def name(self, label: int) -> str:
        if label == BACKGROUND:
            return "background"
        self._check_node(label)
        return self._nodes[label].name

    def subclasses(self, v: int) -> tuple[int, ...]:
        """Direct children of node ``v`` (ascending id)."""
        self._check_node(v)
        return self._children[v]

    def parent(self, v: int) -> int | None:
        self._check_node(v)
        return self._nodes[v].parent

    def ancestor_at_level(self, v: int, level: int) -> int:
        """Label id of the level-``level`` ancestor of ``v`` (background maps to itself)."""
        self._check_level(level)
        if v == BACKGROUND:
            return BACKGROUND
        self._check_node(v)
        node = v
        d = self._depth_of[node]
        if d < level:
            if self._nodes[node].label not in self._leaf_node:
                raise HierarchyError(f"node sits above level {level}", v)
            node = self._leaf_node[self._nodes[node].label]
            d = self.depth
        while d > level:
            node = self._nodes[node].parent
            d -= 1
        return self._nodes[node].label

    def ancestors(self, v: int) -> tuple[int, ...]:
        """Strict ancestors of node ``v`` from parent up to the top level."""
        self._check_node(v)
        out = []
        cur = self._nodes[v].parent
        while cur is not None:
            out.append(cur)
            cur = self._nodes[cur].parent
        return tuple(out)

    def descendant_leaves(self, v: int) -> tuple[int, ...]:
        """Leaf label ids under node ``v`` (``v`` itself if it is a leaf)."""
        self._check_node(v)
        stack, out = [v], []
        while stack:
            cur = stack.pop()
            kids = self._children[cur]
            if kids:
                stack.extend(kids)
            else:
                out.append(self._nodes[cur].label)
        return tuple(sorted(set(out)))

    def child_index(self, level: int) -> list[tuple[int, ...]]:
        """For each channel of ``level`` (<depth): channel indices of its children at level+1.

        Background (channel 0) maps to background.
        """
        self._check_level(level)
        if level == self.depth:
            raise HierarchyError(f"level {level} is the leaf level")
        pos = {n: i + 1 for i, n in enumerate(self._levels[level])}
        out = [(0,)]
        for n in self._levels[level - 1]:
            out.append(tuple(pos[c] for c in self._children[n]))
        return out

    # -- label projection --------------------------------------------------

    def level_lookup(self, level: int) -> np.ndarray:
        """Table mapping leaf label id -> level-``level`` label id; unknown ids map to -1."""
        self._check_level(level)
        if level not in self._lookup_cache:
            size = max(max(self._leaf_node), 0) + 1
            lut = np.full(size, -1, dtype=np.int64)
            lut[BACKGROUND] = BACKGROUND
            for label in self._leaf_node:
                lut[label] = self.ancestor_at_level(label, level)
            lut.setflags(write=False)
            self._lookup_cache[level] = lut
        return self._lookup_cache[level]

    def project_array(self, labels: np.ndarray, level: int) -> np.ndarray:
        lut = self.level_lookup(level)
        labels = np.asarray(labels)
        bad = (labels < 0) | (labels >= lut.size)
        if not bad.any():
            out = lut[labels]
            bad = out < 0
        if bad.any():
            raise HierarchyError("voxel value is not a known leaf", int(labels[bad].flat[0]))
        return out

    # -- misc --------------------------------------------------------------

    def to_document(self, include_aliases: bool = False) -> dict:
        classes = []
        for nid in sorted(self._nodes):
            n = self._nodes[nid]
            if n.alias_of is not None and not include_aliases:
                continue
            entry = {"id": n.id, "name": n.name, "parent": n.parent}
            if include_aliases and n.alias_of is not None:
                entry["alias_of"] = n.alias_of
            classes.append(entry)
        return {"classes": classes}

    def summary(self) -> dict:
        return {
            "depth": self.depth,
            "level_sizes": [len(lv) for lv in self._levels],
            "leaves": len(self._levels[-1]),
            "aliases": sum(1 for n in self._nodes.values() if n.alias_of is not None),
        }

    def _check_node(self, v: int) -> None:
        if v == BACKGROUND:
            raise HierarchyError("background has no tree node", 0)
        if v not in self._nodes:
            raise HierarchyError("unknown node", v)

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.depth:
            raise HierarchyError(f"level {level} outside 1..{self.depth}")

    def __eq__(self, other) -> bool:
        return isinstance(other, SemanticTree) and dict(self._nodes) == dict(other._nodes)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self._nodes.items())))

    def __repr__(self) -> str:
        s = self.summary()
        return f"SemanticTree(depth={s['depth']}, level_sizes={s['level_sizes']})"


def normalize_depths(tree: SemanticTree) -> SemanticTree:
    """Push every leaf down to the deepest level via alias chains."""
    if tree.is_normalized:
        return tree
    nodes = dict(tree.nodes)
    next_id = max(nodes) + 1
    for nid in sorted(tree.nodes):
        if tree.subclasses(nid):
            continue
        d = tree.node_depth(nid)
        parent = nid
        source = tree.nodes[nid].label
        while d < tree.depth:
            nodes[next_id] = Node(next_id, tree.nodes[nid].name, parent, alias_of=source)
            parent = next_id
            next_id += 1
            d += 1
    return SemanticTree(nodes.values())


def parse_hierarchy(text: str | bytes | dict) -> SemanticTree:
    """Build a normalized tree from a hierarchy document (JSON text or parsed dict)."""
    doc = json.loads(text) if isinstance(text, (str, bytes)) else text
    if not isinstance(doc, dict) or not isinstance(doc.get("classes"), list):
        raise HierarchyError('hierarchy document must be an object with a "classes" list')
    nodes = []
    for entry in doc["classes"]:
        try:
            nid = entry["id"]
            name = entry["name"]
            parent = entry.get("parent")
        except (KeyError, TypeError, AttributeError) as exc:
            raise HierarchyError(f"malformed class entry {entry!r}") from exc
        if not isinstance(nid, int) or isinstance(nid, bool):
            raise HierarchyError(f"class id must be an integer, got {nid!r}")
        if parent is not None and (not isinstance(parent, int) or isinstance(parent, bool)):
            raise HierarchyError(f"parent must be an integer or null, got {parent!r}", nid)
        if parent == nid:
            raise HierarchyError("cycle in parent links (node is its own parent)", nid)
        if parent == BACKGROUND:
            raise HierarchyError("id 0 is reserved for background", nid)
        nodes.append(Node(nid, str(name), parent))
    return normalize_depths(SemanticTree(nodes))


def project_labels(tree: SemanticTree, labels: LabelVolume, level: int) -> LabelVolume:
    """Replace every leaf label by its level-``level`` ancestor; spacing and origin are kept."""
    return labels.replace(tree.project_array(labels.data, level))


def load_hierarchy(path: str | Path) -> SemanticTree:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"))


def aorta_hierarchy_text() -> str:
    return resources.files("hierseg.data").joinpath("aorta.json").read_text(encoding="utf-8")


def aorta_hierarchy() -> SemanticTree:
    """The shipped 23-class aorta hierarchy (intermediate grouping is approximate)."""
    return parse_hierarchy(aorta_hierarchy_text())
