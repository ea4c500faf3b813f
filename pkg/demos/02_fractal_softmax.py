"""Fractal softmax: one set of leaf logits, consistent probabilities at every level.

Run:  python demos/02_fractal_softmax.py
"""

import numpy as np

from hierseg.fractal import check_constraints, decode, fractal_softmax, lift_logits
from hierseg.tree import aorta_hierarchy, parse_hierarchy

# Smallest interesting case: Artery -> {Aorta, Branch}.
chain = parse_hierarchy(
    {
        "classes": [
            {"id": 10, "name": "Artery", "parent": None},
            {"id": 1, "name": "Aorta", "parent": 10},
            {"id": 2, "name": "Branch", "parent": 10},
        ]
    }
)
y = np.array([0.0, 2.0, 1.0]).reshape(3, 1, 1, 1)  # background, Aorta, Branch

# A parent's logit is the max over its children; background passes through.
for level, z in enumerate(lift_logits(chain, y), start=1):
    print(f"level {level} logits:", z.ravel())

pyr = fractal_softmax(chain, y)
print("p level 1:", np.round(pyr.level(1).ravel(), 4))  # (0.1192, 0.8808)
print("p level 2:", np.round(pyr.level(2).ravel(), 4))  # (0.0900, 0.6652, 0.2447)
print("decoded:", [v.data.item() for v in decode(pyr, chain)])

# On the full tree the ordering constraints hold for any logits.
tree = aorta_hierarchy()
rng = np.random.default_rng(0)
leaf = rng.normal(0, 5, size=(24, 8, 8, 8))
report = check_constraints(fractal_softmax(tree, leaf), tree, tol=1e-9)
print("violations on random 8^3 logits:", report.total)
print(report.to_json())
