"""Command-line entry point: ``hierseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation/constraint failure, 3 I/O error.
JSON/CSV go to files, one-line summaries to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fractal, grid, loss, metrics, phantom, pipeline, trainer
from .tree import HierarchyError, SemanticTree, aorta_hierarchy_text, load_hierarchy, parse_hierarchy

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _triple(text: str, cast=int) -> tuple:
    parts = [cast(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


def _float_triple(text: str) -> tuple:
    return _triple(text, float)


def _int_range(text: str) -> tuple[int, int]:
    """``"2"`` -> (2, 2); ``"1,3"`` -> (1, 3)."""
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected N or LO,HI, got {text!r}")
    return tuple(parts)


def _box(text: str) -> tuple[int, ...]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 6:
        raise argparse.ArgumentTypeError(f"expected x0,y0,z0,x1,y1,z1, got {text!r}")
    return parts


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _tree(path: str) -> SemanticTree:
    if path == "aorta":
        return parse_hierarchy(aorta_hierarchy_text())
    return load_hierarchy(path)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("HIERSEG_THREADS")
    return int(env) if env else 1


# -- subcommands -------------------------------------------------------------


def cmd_tree(args) -> int:
    if args.action == "dump-aorta":
        Path(args.path).write_text(aorta_hierarchy_text(), encoding="utf-8")
        print(f"wrote {args.path}")
        return EXIT_OK
    t = _tree(args.path)
    s = t.summary()
    if args.out:
        _write_json(args.out, {**s, "levels": {str(l): list(t.level_classes(l)) for l in range(1, t.depth + 1)}})
    sizes = " ".join(f"|V_{l}|={n}" for l, n in enumerate(s["level_sizes"], start=1))
    print(f"L={t.depth} {sizes}")
    return EXIT_OK


def cmd_softmax(args) -> int:
    t = _tree(args.tree)
    leaf = grid.load_vgrid(args.logits, kind="logits")
    pyr = fractal.fractal_softmax(t, np.asarray(leaf.data, dtype=np.float64))
    pyr = fractal.ProbabilityPyramid(pyr.probs, pyr.logits, pyr.channel_maps, leaf.spacing)
    paths = fractal.save_pyramid(pyr, args.out_prefix)
    print(f"wrote {len(paths)} levels to {args.out_prefix}.level*.vgrid")
    return EXIT_OK


def cmd_check(args) -> int:
    t = _tree(args.tree)
    pyr = fractal.load_pyramid(args.pyramid, t.depth)
    rep = fractal.check_constraints(pyr, t, args.tol)
    if args.report:
        _write_json(args.report, rep.to_json())
    print(f"violations={rep.total} worst_margin={rep.worst:.6g}")
    if not rep.ok:
        print(f"constraint check failed: worst margin {rep.worst:.6g}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_eval(args) -> int:
    t = _tree(args.tree)
    pred = grid.load_vgrid(args.pred, kind="labels")
    ref = grid.load_vgrid(args.ref, kind="labels")
    rep = metrics.evaluate_case(pred, ref, t, args.tol_mm, args.case_id or Path(args.pred).stem)
    if args.report:
        rep.save(args.report)
    print(rep.summary_line())
    return EXIT_OK


def cmd_phantom(args) -> int:
    t = _tree(args.tree)
    region = None
    if args.region:
        lo, hi = args.region[:3], args.region[3:]
        region = grid.BoundingBox(tuple(lo), tuple(hi))
    spec = phantom.PhantomSpec(
        dims=args.dims,
        spacing=args.spacing,
        trunk_radius=args.trunk_radius,
        branch_count=args.branches,
        branch_radius=tuple(args.branch_radius),
        policy=args.policy,
        seed=args.seed,
        region=region,
    )
    labels = phantom.generate_vessel_phantom(spec, t)
    grid.save_vgrid(labels, args.out)
    if args.image_out:
        grid.save_vgrid(phantom.phantom_image(labels, args.sigma), args.image_out)
    if args.stats:
        _write_json(args.stats, {"fractions": [[c, f] for c, f in phantom.imbalance_stats(labels)]})
    fg = [(c, f) for c, f in phantom.imbalance_stats(labels) if c]
    ratio = fg[0][1] / fg[-1][1] if fg else 0.0
    print(f"classes={len(fg)} foreground_voxels={int(np.count_nonzero(labels.data))} imbalance={ratio:.2f}")
    return EXIT_OK


def _pipeline_config(args, m: float = 1.0) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(factor=args.factor, m=m, patch=args.patch, stride=args.stride, threads=_threads(args))


def cmd_infer(args) -> int:
    t = _tree(args.tree)
    image = grid.load_vgrid(args.image, kind="scalar")
    if args.scorer != "oracle":
        raise UsageError(f"unknown scorer {args.scorer!r}")
    if not args.truth:
        raise UsageError("--scorer oracle needs --truth")
    truth = grid.load_vgrid(args.truth, kind="labels")
    cfg = _pipeline_config(args, args.m)
    fine = pipeline.oracle_scorer(truth, args.margin, args.noise, args.seed)
    if args.two_stage:
        coarse = pipeline.coarse_oracle_scorer(truth, t, cfg.factor, args.margin, args.noise, args.seed)
        res = pipeline.run_two_stage(image, coarse, fine, cfg, t)
    else:
        res = pipeline.run_one_stage(image, fine, cfg, t)
    grid.save_vgrid(res.labels, args.out)
    if args.meta:
        _write_json(
            args.meta,
            {
                "voxels_scored": res.voxels_scored,
                "roi": None if res.roi is None else res.roi.to_json(),
                "fallback": res.fallback,
                "timing": {"seconds": res.seconds},
            },
        )
    if res.fallback:
        print("warning: stage 1 found no foreground, fell back to one-stage", file=sys.stderr)
    print(f"voxels_scored={res.voxels_scored} fallback={str(res.fallback).lower()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    t = _tree(args.tree)
    if args.truth:
        truth = grid.load_vgrid(args.truth, kind="labels")
    else:
        truth = phantom.acceptance_phantom(t, args.seed)
    image = grid.load_vgrid(args.image, kind="scalar") if args.image else phantom.phantom_image(truth)
    cfg = _pipeline_config(args)
    coarse = pipeline.coarse_oracle_scorer(truth, t, cfg.factor)
    fine = pipeline.oracle_scorer(truth)
    rep = pipeline.benchmark(image, (coarse, fine), cfg, args.m, t, args.out_dir)
    pipeline.save_bench_report(rep, args.report)
    ratios = " ".join(f"m={m}:{rep.one_stage_voxels / v:.2f}x" for m, v in rep.two_stage_voxels.items())
    print(f"one_stage_voxels={rep.one_stage_voxels} speedup {ratios}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t = _tree(args.tree)
    w = loss.load_loss_config(args.loss_config) if args.loss_config else loss.LossWeights()
    rng = np.random.default_rng(args.seed)
    if args.labels:
        labels = grid.load_vgrid(args.labels, kind="labels").data
    else:
        labels = rng.choice(np.array(t.channel_map(t.depth)), size=args.dims)
    y = rng.normal(0.0, 2.0, size=(len(t.channel_map(t.depth)),) + tuple(labels.shape))
    res = loss.finite_diff_check(y, labels, t, w, args.h, args.coords, args.seed)
    if args.report:
        _write_json(args.report, res.to_json())
    print(f"max_rel_error={res.max_rel_error:.3e} checked={res.checked} skipped_ties={res.skipped_ties}")
    return EXIT_OK if res.max_rel_error < args.tol else EXIT_INVALID


def cmd_train_toy(args) -> int:
    t = _tree(args.tree)
    labels = grid.load_vgrid(args.labels, kind="labels")
    w = loss.load_loss_config(args.loss_config) if args.loss_config else loss.LossWeights()
    if args.mode == "hier":
        schedule = loss.TrainingSchedule(args.epochs) if args.curriculum else None
        res = trainer.fit_logits(labels, t, w, schedule, args.epochs, args.step, args.seed)
    else:
        res = trainer.fit_logits(labels, t, trainer.flat_weights(t, w), None, args.epochs, args.step, args.seed)
    res.curve.write_csv(args.curve)
    c = res.curve
    mean_dice = float(np.mean(list(c.dice[-1].values()))) if c.dice else 0.0
    print(f"epochs={c.epochs} final_loss={c.loss[-1]:.6g} mean_dice={mean_dice:.4f} diverged={str(c.diverged).lower()}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hierseg", description="Hierarchy-aware volumetric segmentation toolkit.")
    p.add_argument("--threads", type=int, default=None, help="worker cap (fallback: HIERSEG_THREADS)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("tree", help="validate or export a hierarchy")
    s.add_argument("action", choices=["validate", "dump-aorta"])
    s.add_argument("path", help="hierarchy JSON ('aorta' for the shipped one)")
    s.add_argument("--out", help="write a JSON summary here")
    s.set_defaults(func=cmd_tree)

    s = sub.add_parser("softmax", help="apply fractal softmax to leaf logits")
    s.add_argument("--logits", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_softmax)

    s = sub.add_parser("check", help="verify probability constraints of a pyramid")
    s.add_argument("--pyramid", required=True, help="prefix of <prefix>.level<l>.vgrid files")
    s.add_argument("--tree", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--report")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("eval", help="per-class DSC/NSD and centerline scores")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--tol-mm", type=float, default=2.0)
    s.add_argument("--case-id")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("phantom", help="generate a synthetic vessel phantom")
    s.add_argument("--dims", type=_triple, default=(96, 96, 96))
    s.add_argument("--spacing", type=_float_triple, default=(1.0, 1.0, 1.0))
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--tree", required=True)
    s.add_argument("--trunk-radius", type=int, default=8)
    s.add_argument("--branches", type=int, default=4)
    s.add_argument("--branch-radius", type=_int_range, default=(1, 3), help="N or LO,HI")
    s.add_argument("--policy", choices=["sequential", "random"], default="sequential")
    s.add_argument("--region", type=_box, help="x0,y0,z0,x1,y1,z1")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--image-out")
    s.add_argument("--stats")
    s.set_defaults(func=cmd_phantom)

    def pipeline_args(s):
        s.add_argument("--tree", default="aorta")
        s.add_argument("--factor", type=int, default=4)
        s.add_argument("--patch", type=_triple, default=pipeline.DEFAULT_PATCH)
        s.add_argument("--stride", type=float, default=0.5)
        s.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap (fallback: HIERSEG_THREADS)")

    s = sub.add_parser("infer", help="one- or two-stage inference with an oracle scorer")
    s.add_argument("--image", required=True)
    s.add_argument("--scorer", default="oracle")
    s.add_argument("--truth")
    s.add_argument("--two-stage", action="store_true")
    s.add_argument("--m", type=float, default=1)
    s.add_argument("--margin", type=float, default=10.0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--meta", help="write voxel counts / ROI JSON here")
    pipeline_args(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="voxel work of one-stage vs two-stage for several m")
    s.add_argument("--m", type=_float_list, default=[1.0, 2.0, 3.0, 4.0])
    s.add_argument("--report", required=True)
    s.add_argument("--truth")
    s.add_argument("--image")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out-dir")
    pipeline_args(s)
    s.set_defaults(func=cmd_bench, patch=(32, 32, 32))

    s = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    s.add_argument("--tree", default="aorta")
    s.add_argument("--labels")
    s.add_argument("--dims", type=_triple, default=(4, 4, 4))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--coords", type=int, default=64)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--loss-config")
    s.add_argument("--report")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train-toy", help="gradient descent on per-voxel logits")
    s.add_argument("--labels", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--mode", choices=["hier", "flat"], default="hier")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--no-curriculum", dest="curriculum", action="store_false")
    s.add_argument("--loss-config")
    s.add_argument("--curve", required=True)
    s.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"hierseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, grid.VGridError) as exc:
        print(f"hierseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (HierarchyError, ValueError) as exc:
        print(f"hierseg: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
