"""Two-stage inference: find the vessels on a coarse grid, then segment only that box.

Scorers here are oracles that read the ground truth, so the numbers measure
pipeline work (voxels pushed through the scorer), not model quality.

Run:  python demos/05_two_stage_inference.py
"""

import numpy as np

from hierseg.phantom import acceptance_phantom, phantom_image
from hierseg.pipeline import PipelineConfig, benchmark, coarse_oracle_scorer, oracle_scorer, run_one_stage, run_two_stage
from hierseg.tree import aorta_hierarchy

tree = aorta_hierarchy()
truth = acceptance_phantom(tree)  # 96^3 volume, vessels inside a 24^3 region
image = phantom_image(truth)
cfg = PipelineConfig(patch=(32, 32, 32))

fine = oracle_scorer(truth)
coarse = coarse_oracle_scorer(truth, tree, cfg.factor)
one = run_one_stage(image, fine, cfg, tree)
two = run_two_stage(image, coarse, fine, cfg, tree)
print(f"one-stage voxels scored: {one.voxels_scored:,}")
print(f"two-stage voxels scored: {two.voxels_scored:,}  ROI {two.roi.lo}..{two.roi.hi}")
fg = truth.data != 0
print("identical on vessel voxels:", np.array_equal(one.labels.data[fg], two.labels.data[fg]))

# Growing the ROI costs work; once it covers the whole volume the coarse pass is pure overhead.
report = benchmark(image, (coarse, fine), cfg, [1, 2, 3, 4, 8], tree)
for m, work in report.two_stage_voxels.items():
    print(f"m={m:<3} work={work:>9,}  ({report.one_stage_voxels / work:5.2f}x less than one-stage)")
