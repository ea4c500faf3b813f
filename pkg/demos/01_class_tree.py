"""Class trees: how 23 aortic regions become a 4-level hierarchy.

Run:  python demos/01_class_tree.py
"""

import numpy as np

from hierseg.grid import LabelVolume
from hierseg.tree import aorta_hierarchy, parse_hierarchy, project_labels

# The shipped hierarchy groups the 23 regions into zones and branch families.
tree = aorta_hierarchy()
print(tree)
for level in range(1, tree.depth + 1):
    names = [tree.name(c) for c in tree.level_classes(level)]
    print(f"level {level}: {len(names):2d} classes  e.g. {names[:3]}")

# Some leaves sit higher than others. The innominate artery (2) hangs directly
# under the supra-aortic group, so it is padded down with alias nodes and
# appears under its own id at level 3 as well.
print("innominate at level 3 ->", tree.ancestor_at_level(2, 3))
print("innominate at level 2 ->", tree.name(tree.ancestor_at_level(2, 2)))

# Projection replaces each leaf label by its ancestor on a coarser level.
labels = LabelVolume(np.array([1, 2, 9, 0]).reshape(4, 1, 1))
for level in (1, 2, 3, 4):
    print(f"project to level {level}:", project_labels(tree, labels, level).data.ravel().tolist())

# Any JSON document with {"classes": [{id, name, parent}]} works; uneven depths get normalized.
custom = parse_hierarchy(
    {
        "classes": [
            {"id": 10, "name": "vessel", "parent": None},
            {"id": 1, "name": "trunk", "parent": 10},
            {"id": 2, "name": "branch", "parent": 10},
            {"id": 3, "name": "calcification", "parent": None},
        ]
    }
)
print(custom, "aliases:", custom.summary()["aliases"])
