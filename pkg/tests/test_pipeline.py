import numpy as np
import pytest

from hierseg.grid import BoundingBox, LabelVolume, LogitField, ScalarField
from hierseg.phantom import PhantomSpec, acceptance_phantom, generate_vessel_phantom, phantom_image
from hierseg.pipeline import (
    ConstantScorer,
    PipelineConfig,
    benchmark,
    coarse_oracle_scorer,
    coarse_truth,
    oracle_scorer,
    run_one_stage,
    run_two_stage,
    window_starts,
)
from hierseg.tree import aorta_hierarchy

TREE = aorta_hierarchy()
CFG = PipelineConfig(patch=(16, 16, 16))


@pytest.fixture(scope="module")
def small():
    spec = PhantomSpec(dims=(40, 40, 40), trunk_radius=3, branch_count=2, branch_radius=(1, 2),
                       region=BoundingBox((12, 12, 12), (30, 30, 30)))
    labels = generate_vessel_phantom(spec, TREE)
    return labels, phantom_image(labels)


def test_window_starts():
    assert window_starts(10, 16, 0.5) == [0]
    assert window_starts(16, 16, 0.5) == [0]
    s = window_starts(40, 16, 0.5)
    assert s[0] == 0 and s[-1] == 24
    assert all(b - a <= 8 for a, b in zip(s, s[1:]))


def test_oracle_decode_equals_truth(small):
    labels, image = small
    res = run_one_stage(image, oracle_scorer(labels), CFG, TREE)
    assert res.labels == labels


def test_constant_scorer_gives_background(small):
    _, image = small
    res = run_one_stage(image, ConstantScorer(), CFG, TREE)
    assert not res.labels.data.any()


def test_patch_larger_than_volume(small):
    labels, image = small
    res = run_one_stage(image, oracle_scorer(labels), PipelineConfig(patch=(64, 64, 64)), TREE)
    assert res.labels.dims == labels.dims
    assert res.voxels_scored == 64**3
    assert res.labels == labels


def test_oracle_noise_is_seeded():
    labels = LabelVolume(np.ones((8, 8, 8), dtype=np.uint16))
    region = ScalarField(np.zeros((8, 8, 8)))
    a = oracle_scorer(labels, noise=2.0, seed=5).score(region, TREE.channel_map(4))
    b = oracle_scorer(labels, noise=2.0, seed=5).score(region, TREE.channel_map(4))
    assert np.array_equal(a.data, b.data)


def test_noise_equal_to_margin_causes_errors():
    spec = PhantomSpec(dims=(32, 32, 32), trunk_radius=4, branch_count=4, branch_radius=(1, 2), seed=7)
    labels = generate_vessel_phantom(spec, TREE)
    res = run_one_stage(phantom_image(labels), oracle_scorer(labels, 10.0, 10.0, 3), PipelineConfig(patch=(32,) * 3), TREE)
    assert int(np.count_nonzero(res.labels.data != labels.data)) == 26151


def test_two_stage_matches_one_stage_inside_roi(small):
    labels, image = small
    fine = oracle_scorer(labels)
    coarse = coarse_oracle_scorer(labels, TREE, 4)
    one = run_one_stage(image, fine, CFG, TREE)
    two = run_two_stage(image, coarse, fine, CFG, TREE)
    assert not two.fallback
    inside = np.zeros(labels.dims, bool)
    inside[two.roi.slices] = True
    assert np.array_equal(two.labels.data[inside], one.labels.data[inside])
    assert not two.labels.data[~inside].any()
    fg = labels.data != 0
    assert np.array_equal(two.labels.data[fg], one.labels.data[fg])


def test_huge_m_reduces_to_one_stage(small):
    labels, image = small
    fine = oracle_scorer(labels)
    two = run_two_stage(image, coarse_oracle_scorer(labels, TREE, 4), fine, PipelineConfig(patch=(16,) * 3, m=50), TREE)
    assert two.roi == BoundingBox.full(labels.dims)
    assert two.labels == run_one_stage(image, fine, CFG, TREE).labels


def test_all_background_falls_back(small):
    _, image = small
    empty = LabelVolume(np.zeros(image.dims, dtype=np.uint16))
    two = run_two_stage(image, coarse_oracle_scorer(empty, TREE, 4), oracle_scorer(empty), CFG, TREE)
    assert two.fallback
    assert not two.labels.data.any()


def test_coarse_truth_keeps_thin_branches():
    labels = LabelVolume(np.zeros((8, 8, 8), dtype=np.uint16))
    arr = np.array(labels.data)
    arr[0, 0, 0] = 5  # a single voxel in a 4^3 block
    ct = coarse_truth(LabelVolume(arr), TREE, 4)
    assert ct.dims == (2, 2, 2) and ct.data[0, 0, 0] == TREE.level_classes(1)[0]
    assert ct.data.sum() == ct.data[0, 0, 0]


def test_voxel_work_grows_with_m_and_thread_count_is_irrelevant():
    truth = acceptance_phantom(TREE)
    image = phantom_image(truth)
    scorers = (coarse_oracle_scorer(truth, TREE, 4), oracle_scorer(truth))
    rep1 = benchmark(image, scorers, PipelineConfig(patch=(32,) * 3), [1, 2, 3, 4], TREE)
    work = [rep1.two_stage_voxels[m] for m in (1, 2, 3, 4)]
    assert all(a < b for a, b in zip(work, work[1:]))
    assert work[0] * 5 <= rep1.one_stage_voxels
    rep4 = benchmark(image, scorers, PipelineConfig(patch=(32,) * 3, threads=4), [1, 2, 3, 4], TREE)
    assert rep1.two_stage_voxels == rep4.two_stage_voxels


def test_scorer_shape_violation(small):
    _, image = small

    class Bad:
        descriptor = "bad"

        def score(self, region, channel_map):
            return LogitField(np.zeros((len(channel_map), 2, 2, 2)), channel_map)

    with pytest.raises(ValueError, match="scorer shape violation"):
        run_one_stage(image, Bad(), CFG, TREE)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(m=0.5)
    with pytest.raises(ValueError):
        PipelineConfig(stride=0)
    with pytest.raises(ValueError):
        PipelineConfig(patch=(4, 4, 4))
