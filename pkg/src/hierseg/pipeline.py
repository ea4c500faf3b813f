"""One-stage and two-stage (coarse ROI, then fine) sliding-window inference.

The network is abstracted as a :class:`Scorer`.  Work is measured in voxels
handed to scorers, padding included, so comparisons don't depend on hardware.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .fractal import decode_leaf
from .grid import (
    BoundingBox,
    LabelVolume,
    LogitField,
    ScalarField,
    block_any,
    block_sum,
    crop,
    downsample,
    expand_bbox,
    foreground_bbox,
    paste_back,
    save_vgrid,
    upsample_nearest,
)
from .tree import SemanticTree

DEFAULT_PATCH = (112, 112, 176)


class Scorer(Protocol):
    descriptor: str

    def score(self, region: ScalarField, channel_map: tuple[int, ...]) -> LogitField: ...


@dataclass(frozen=True)
class PipelineConfig:
    factor: int = 4
    m: float = 1
    patch: tuple[int, int, int] = DEFAULT_PATCH
    stride: float = 0.5
    threads: int = 1

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.m < 1:
            raise ValueError("expansion factor m must be >= 1")
        if len(self.patch) != 3 or min(self.patch) < 8:
            raise ValueError("patch dims must be >= 8 per axis")
        if not 0 < self.stride <= 1:
            raise ValueError("stride fraction must be in (0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class InferenceResult:
    labels: LabelVolume
    voxels_scored: int
    roi: BoundingBox | None = None
    fallback: bool = False
    seconds: float = 0.0


# -- oracle scorers ----------------------------------------------------------


class OracleScorer:
    """Emits ``margin`` on the true channel and 0 elsewhere, plus seeded Gaussian noise.

    Noise is drawn once over the whole truth grid, so a voxel gets the same
    logits from every patch that covers it.  Positions outside the truth grid
    score as background.
    """

    def __init__(self, truth: LabelVolume, margin: float = 10.0, noise: float = 0.0, seed: int = 0):
        if margin <= 0:
            raise ValueError("margin must be positive")
        self.truth = truth
        self.margin = float(margin)
        self.noise = float(noise)
        self.seed = int(seed)
        self._noise_cache: dict[tuple[int, ...], np.ndarray] = {}
        self.descriptor = f"oracle(margin={self.margin}, noise={self.noise}, seed={self.seed})"

    def _noise_field(self, channel_map) -> np.ndarray:
        if channel_map not in self._noise_cache:
            rng = np.random.default_rng(self.seed)
            self._noise_cache[channel_map] = rng.normal(
                0.0, self.noise, size=(len(channel_map),) + self.truth.dims
            ).astype(np.float32)
        return self._noise_cache[channel_map]

    def score(self, region: ScalarField, channel_map: tuple[int, ...]) -> LogitField:
        channel_map = tuple(channel_map)
        dims = region.dims
        lo = region.origin
        src = BoundingBox(
            tuple(min(max(o, 0), d) for o, d in zip(lo, self.truth.dims)),
            tuple(min(max(o + n, 0), d) for o, n, d in zip(lo, dims, self.truth.dims)),
        )
        dst = tuple(slice(a - o, b - o) for a, b, o in zip(src.lo, src.hi, lo))
        labels = np.zeros(dims, dtype=np.int64)
        labels[dst] = self.truth.data[src.slices]
        index = {c: i for i, c in enumerate(channel_map)}
        lut = np.full(int(labels.max()) + 1, -1, dtype=np.intp)
        for c in np.unique(labels):
            if int(c) not in index:
                raise ValueError(f"truth label {int(c)} not in channel map {channel_map}")
            lut[c] = index[int(c)]
        logits = np.zeros((len(channel_map),) + dims, dtype=np.float32)
        np.put_along_axis(logits, lut[labels][None], self.margin, axis=0)
        if self.noise:
            full = self._noise_field(channel_map)
            logits[(slice(None),) + dst] += full[(slice(None),) + src.slices]
        return LogitField(logits, channel_map, region.spacing, region.origin)


class ConstantScorer:
    """Scores every voxel as background."""

    descriptor = "constant-background"

    def score(self, region: ScalarField, channel_map: tuple[int, ...]) -> LogitField:
        logits = np.zeros((len(channel_map),) + region.dims, dtype=np.float32)
        logits[0] = 1.0
        return LogitField(logits, channel_map, region.spacing, region.origin)


def oracle_scorer(truth: LabelVolume, margin: float = 10.0, noise: float = 0.0, seed: int = 0) -> OracleScorer:
    return OracleScorer(truth, margin, noise, seed)


def coarse_truth(truth: LabelVolume, tree: SemanticTree, factor: int) -> LabelVolume:
    """Level-1 labels on the coarse grid; a block is foreground if any of its voxels is.

    Foreground blocks take the majority level-1 class among their foreground
    voxels (ties to the smallest id), so thin vessels are not voted away.
    """
    level1 = tree.project_array(truth.data, 1)
    if factor == 1:
        return LabelVolume(level1, truth.spacing)
    fg = block_any(level1 != 0, factor)
    best = np.zeros(fg.shape, dtype=np.uint16)
    best_count = np.zeros(fg.shape, dtype=np.int64)
    for c in tree.level_classes(1):
        cnt = block_sum((level1 == c).astype(np.int32), factor)
        win = cnt > best_count
        best[win] = c
        best_count = np.where(win, cnt, best_count)
    best[~fg] = 0
    return LabelVolume(best, tuple(s * factor for s in truth.spacing))


def coarse_oracle_scorer(truth: LabelVolume, tree: SemanticTree, factor: int, margin: float = 10.0,
                         noise: float = 0.0, seed: int = 0) -> OracleScorer:
    return OracleScorer(coarse_truth(truth, tree, factor), margin, noise, seed)


# -- sliding window ----------------------------------------------------------


def window_starts(n: int, p: int, stride: float) -> list[int]:
    """Evenly spaced patch starts covering [0, n) with the last patch flush to the end."""
    if n <= p:
        return [0]
    step = max(1, int(p * stride))
    count = math.ceil((n - p) / step) + 1
    actual = (n - p) / (count - 1)
    return [int(round(i * actual)) for i in range(count)]


def _sliding_window(image: ScalarField, scorer, channel_map, cfg: PipelineConfig) -> tuple[LogitField, int]:
    dims = image.dims
    padded_dims = tuple(max(d, p) for d, p in zip(dims, cfg.patch))
    if padded_dims != dims:
        pad = [(0, pd - d) for pd, d in zip(padded_dims, dims)]
        padded = ScalarField(np.pad(image.data, pad), image.spacing, image.origin)
    else:
        padded = image
    starts = [window_starts(n, p, cfg.stride) for n, p in zip(padded_dims, cfg.patch)]
    boxes = [
        BoundingBox((a, b, c), (a + cfg.patch[0], b + cfg.patch[1], c + cfg.patch[2]))
        for a in starts[0]
        for b in starts[1]
        for c in starts[2]
    ]
    acc = np.zeros((len(channel_map),) + padded_dims, dtype=np.float64)
    hits = np.zeros(padded_dims, dtype=np.int32)

    def run(box: BoundingBox) -> LogitField:
        region = crop(padded, box)
        out = scorer.score(region, channel_map)
        if out.dims != region.dims or out.channel_map != tuple(channel_map):
            raise ValueError(
                f"scorer shape violation: got {out.dims}/{out.channel_map}, "
                f"expected {region.dims}/{tuple(channel_map)}"
            )
        return out

    # results are accumulated in box order whatever the thread count
    batch = max(1, 2 * cfg.threads)
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for i in range(0, len(boxes), batch):
            chunk = boxes[i : i + batch]
            for box, out in zip(chunk, pool.map(run, chunk)):
                acc[(slice(None),) + box.slices] += out.data
                hits[box.slices] += 1
    acc /= hits
    acc = acc[:, : dims[0], : dims[1], : dims[2]]
    voxels = len(boxes) * math.prod(cfg.patch)
    return LogitField(acc, tuple(channel_map), image.spacing, image.origin), voxels


def run_one_stage(image: ScalarField, scorer, cfg: PipelineConfig, tree: SemanticTree) -> InferenceResult:
    t0 = time.perf_counter()
    logits, voxels = _sliding_window(image, scorer, tree.channel_map(tree.depth), cfg)
    labels = decode_leaf(logits)
    return InferenceResult(labels, voxels, BoundingBox.full(image.dims), False, time.perf_counter() - t0)


def run_two_stage(
    image: ScalarField, scorer_coarse, scorer_fine, cfg: PipelineConfig, tree: SemanticTree
) -> InferenceResult:
    t0 = time.perf_counter()
    coarse = downsample(ScalarField(image.data, image.spacing), cfg.factor)
    logits, v1 = _sliding_window(coarse, scorer_coarse, tree.channel_map(1), cfg)
    fg = decode_leaf(logits).data != 0
    if not fg.any():
        res = run_one_stage(image, scorer_fine, cfg, tree)
        res.voxels_scored += v1
        res.fallback = True
        res.seconds = time.perf_counter() - t0
        return res
    mask = upsample_nearest(fg, cfg.factor, image.dims)
    roi = expand_bbox(foreground_bbox(mask), cfg.m, image.dims)
    inner = run_one_stage(crop(image, roi), scorer_fine, cfg, tree)
    blank = LabelVolume(np.zeros(image.dims, dtype=np.uint16), image.spacing)
    labels = paste_back(blank, inner.labels, roi)
    return InferenceResult(labels, v1 + inner.voxels_scored, roi, False, time.perf_counter() - t0)


# -- benchmark ---------------------------------------------------------------


@dataclass
class BenchReport:
    one_stage_voxels: int
    two_stage_voxels: dict[float, int] = field(default_factory=dict)
    rois: dict[float, BoundingBox] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        """Deterministic fields first; wall-clock numbers live under ``timing`` only."""
        modes = [{"mode": "one-stage", "voxels_scored": self.one_stage_voxels}]
        for m, v in self.two_stage_voxels.items():
            modes.append(
                {
                    "mode": "two-stage",
                    "m": m,
                    "voxels_scored": v,
                    "roi": self.rois[m].to_json(),
                    "speedup_voxels": self.one_stage_voxels / v,
                }
            )
        return {"modes": modes, "outputs": self.outputs, "timing": {"seconds": self.seconds}}


def benchmark(
    image: ScalarField,
    scorers: tuple,
    cfg: PipelineConfig,
    m_list: Sequence[float],
    tree: SemanticTree,
    out_dir: str | Path | None = None,
) -> BenchReport:
    """Run one-stage once and two-stage for every ``m``; ``scorers`` is (coarse, fine)."""
    if not m_list:
        raise ValueError("m_list must be nonempty")
    coarse, fine = scorers
    one = run_one_stage(image, fine, cfg, tree)
    rep = BenchReport(one.voxels_scored)
    rep.seconds["one-stage"] = one.seconds
    outputs = {"one-stage": one.labels}
    for m in m_list:
        res = run_two_stage(image, coarse, fine, PipelineConfig(cfg.factor, m, cfg.patch, cfg.stride, cfg.threads), tree)
        rep.two_stage_voxels[m] = res.voxels_scored
        rep.rois[m] = res.roi
        rep.seconds[f"two-stage m={m}"] = res.seconds
        outputs[f"two-stage-m{m}"] = res.labels
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, vol in outputs.items():
            p = out_dir / f"{name}.vgrid"
            save_vgrid(vol, p)
            rep.outputs[name] = p.name
    return rep


def save_bench_report(rep: BenchReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
