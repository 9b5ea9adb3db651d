"""Command-line interface: train, eval, ablate, gradcheck, export-graph.

Exit codes: 0 success, 1 failed checks, 2 configuration problems, 3 shape
contract violations, 4 numeric blow-ups, 5 checkpoint/model mismatches.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine
from .checkpoint import load_arrays, load_params
from .config import RunConfig, load_run_config
from .errors import (CheckpointMismatchError, ConfigError, NumericsError,
                     ShapeError)
from .formats import write_detections, write_gt_boxes
from .gradcheck import corrupted_backward, finite_diff_check
from .head import (AnchorSet, Detector, GroundTruthBox, assign_targets,
                   compute_loss)
from .layers import ConvLayer, PointwiseLayer
from .pyramid import (BottomUpFusion, CoreBlock, FeatureMap, FusionStage,
                      PyramidConfig, PyramidModel, export_topology)
from .training import FINAL_NAME, ValRunner, run_training

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SHAPE = 3
EXIT_NUMERICS = 4
EXIT_CHECKPOINT = 5

ABLATION_VARIANTS = (
    ("baseline", dict(use_residual=False, use_parallel=False, use_bfm=False)),
    ("residual", dict(use_residual=True, use_parallel=False, use_bfm=False)),
    ("residual_parallel",
     dict(use_residual=True, use_parallel=True, use_bfm=False)),
    ("residual_parallel_bfm",
     dict(use_residual=True, use_parallel=True, use_bfm=True)),
)


def _load_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def _checkpoint_param_count(path) -> int:
    return sum(int(np.prod(arr.shape)) for arr in load_arrays(path).values())


def _require_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def cmd_train(args) -> int:
    from . import reports
    cfg = _load_config(args)
    if args.checkpoint is not None:
        _require_file(args.checkpoint, "resume checkpoint")
    result = run_training(cfg, resume_from=args.checkpoint, progress=print)
    out_dir = result.output_dir

    summary = {"epochs": cfg.train.epochs,
               "param_count": _checkpoint_param_count(out_dir / FINAL_NAME)}
    if result.first_epoch_loss is not None:
        summary["first_epoch_loss"] = result.first_epoch_loss
        summary["final_loss"] = result.final_loss
        summary["loss_ratio"] = result.final_loss / result.first_epoch_loss
    if result.final_val is not None:
        for key, value in result.final_val.as_dict().items():
            summary["final_val_" + key] = value
        summary["best_val_ap"] = result.best_val_ap
        summary["best_epoch"] = result.best_epoch
    reports.write_key_values(out_dir / "train_report.txt", summary)
    if result.records:
        reports.plot_training_curves(result.records, out_dir / "loss_curve.png")
    print(f"wrote {out_dir / FINAL_NAME} and {out_dir / 'train_report.txt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import reports
    cfg = _load_config(args)
    _require_file(args.checkpoint, "checkpoint")
    detector = cfg.build_detector()
    load_params(args.checkpoint, detector.params())
    runner = ValRunner(cfg)
    result, dets, gts, mean_forward = runner(detector)

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # record the file name only: absolute paths would make otherwise
    # deterministic reports differ across output directories and machines
    report = {"checkpoint": Path(args.checkpoint).name,
              "val_count": cfg.data.val_count,
              "score_thresh": cfg.eval.score_thresh,
              "nms_iou": cfg.eval.nms_iou}
    report.update(result.as_dict())
    reports.write_key_values(out_dir / "eval_report.txt", report)
    write_detections(out_dir / "detections.tsv", dets)
    write_gt_boxes(out_dir / "val_gt.tsv", gts)
    reports.write_pr_outputs(dets, gts, out_dir / "pr_curve.tsv",
                             out_dir / "pr_curves.png")
    (out_dir / "timing.txt").write_text(
        f"mean_forward_seconds_per_image={mean_forward:.6f}\n",
        encoding="utf-8")
    for key, value in result.as_dict().items():
        print(f"{key}={value:.6f}")
    print(f"mean_forward_seconds_per_image={mean_forward:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import reports
    cfg = _load_config(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant_name, toggles in ABLATION_VARIANTS:
        for seed in range(cfg.train.seed, cfg.train.seed + 3):
            run_dir = out_dir / f"{variant_name}_seed{seed}"
            sub = cfg.with_overrides(model=toggles, train={"seed": seed},
                                     output_dir=str(run_dir))
            print(f"training {variant_name} seed={seed}")
            result = run_training(sub)
            row = {"variant": variant_name, "seed": seed,
                   "params": _checkpoint_param_count(run_dir / FINAL_NAME),
                   "final_loss": result.final_loss}
            row.update(result.final_val.as_dict())
            rows.append(row)
    reports.write_ablation_outputs(rows, out_dir)
    print(reports.format_summary_table(rows))
    print(f"wrote {out_dir / 'ablation_summary.tsv'}")
    return EXIT_OK


def _gradcheck_suite(cfg: RunConfig):
    """(name, loss_fn, params) triples covering every block type, float64."""
    rng = np.random.default_rng(12345)
    f64 = np.float64

    def tensor(*shape):
        return engine.Tensor(rng.normal(0.0, 1.0, size=shape).astype(f64))

    suite = []

    conv = ConvLayer("conv", 3, 4, 3, rng, pad=1, dtype=f64)
    x_conv = tensor(2, 3, 6, 6)
    suite.append(("conv3x3",
                  lambda: engine.sum_all(conv(x_conv)), conv.params()))

    pw = PointwiseLayer("pointwise", 4, 3, rng, dtype=f64)
    x_pw = tensor(2, 4, 5, 5)
    suite.append(("pointwise_conv",
                  lambda: engine.sum_all(pw(x_pw)), pw.params()))

    c = 4
    core = CoreBlock("core", c, has_shallow=True, has_deep=True, rng=rng,
                     dtype=f64)
    shallow = FeatureMap(tensor(1, c, 8, 8), 1)
    current = FeatureMap(tensor(1, c, 4, 4), 2)
    deep = FeatureMap(tensor(1, c, 2, 2), 3)
    suite.append(("core_block",
                  lambda: engine.sum_all(core(shallow, current, deep).tensor),
                  core.params()))

    stage = FusionStage("stage", c, has_shallow=True, has_deep=True,
                        has_skip=True, rng=rng, dtype=f64)
    skip = FeatureMap(tensor(1, c, 2, 2), 3)
    suite.append(("fusion_stage_residual",
                  lambda: engine.sum_all(
                      stage(shallow, current, deep, skip).tensor),
                  stage.params()))

    bfm_cfg = PyramidConfig(num_levels=3, num_maps=2, fuse_channels=c,
                            head_channels=c, use_bfm=True)
    bfm = BottomUpFusion("bfm", bfm_cfg, rng, dtype=f64)
    bfm_maps = [FeatureMap(tensor(1, c, 2, 2), 3),
                FeatureMap(tensor(1, c, 4, 4), 2)]
    suite.append(("bottom_up_fusion",
                  lambda: engine.sum_all(bfm(bfm_maps)[0].tensor),
                  bfm.params()))

    toy = PyramidConfig(num_levels=3, num_maps=2, fuse_channels=c,
                        head_channels=c,
                        use_residual=cfg.model.use_residual,
                        use_parallel=cfg.model.use_parallel,
                        use_bfm=cfg.model.use_bfm)
    head_cfg = replace(cfg.head_config(),
                       priors_per_level=(((3.0, 3.0), (5.0, 5.0)),
                                         ((2.0, 2.0), (3.0, 4.0))))
    detector = Detector(toy, head_cfg, seed=7, dtype=f64)
    image = engine.Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)).astype(f64))
    anchor_set = AnchorSet(toy, 8, head_cfg.priors_per_level)
    gts = [[GroundTruthBox(4.0, 4.0, 3.0, 3.0, 0),
            GroundTruthBox(2.0, 6.0, 2.0, 2.0, 2)]]
    assignments = [assign_targets(anchor_set, gts[0])]

    def model_loss():
        raw = detector.forward(image)
        loss, _ = compute_loss(raw, anchor_set, assignments, gts, head_cfg)
        return loss

    suite.append(("model_with_head_loss", model_loss, detector.params()))
    return suite


def cmd_gradcheck(args) -> int:
    from . import reports
    cfg = _load_config(args)
    suite = _gradcheck_suite(cfg)
    lines = []
    failed = []
    for name, loss_fn, params in suite:
        if args.corrupt_backward:
            with corrupted_backward():
                report = finite_diff_check(loss_fn, params,
                                           n_probes=args.probes)
        else:
            report = finite_diff_check(loss_fn, params, n_probes=args.probes)
        status = "pass" if report.passed else "fail"
        if not report.passed:
            failed.append(name)
        line = (f"check={name} probes={len(report.probes)} "
                f"max_rel_err={report.max_rel_err:.3e} status={status}")
        lines.append(line)
        print(line)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gradcheck_report.txt").write_text(
        "\n".join(lines) + "\n", encoding="utf-8")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_export_graph(args) -> int:
    cfg = _load_config(args)
    model = PyramidModel(cfg.pyramid_config(), seed=cfg.train.seed)
    dot = export_topology(model)
    if args.output is not None:
        out_path = Path(args.output)
    else:
        out_path = Path(cfg.output_dir) / "topology.dot"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(dot, encoding="utf-8")
    nodes = sum(1 for line in dot.splitlines()
                if '" [' in line and '" -> "' not in line)
    edges = sum(1 for line in dot.splitlines() if '" -> "' in line)
    print(f"wrote {out_path} ({nodes} nodes, {edges} edges)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minifpn",
        description="Train and evaluate the toy bi-fusion pyramid detector.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="key=value run configuration file")
    common.add_argument("--seed", type=int, default=None,
                        help="override train.seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numeric kernels")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common],
                       help="train and checkpoint a detector")
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="resume from this parameters checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the val split")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="train the four structural variants x 3 seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks over every block type")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--corrupt-backward", action="store_true",
                   help="inject a backward-pass fault (checks must fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-graph", parents=[common],
                       help="write the block topology as a DOT file")
    p.add_argument("--output", metavar="PATH", default=None)
    p.set_defaults(func=cmd_export_graph)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.deterministic:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=1):
                return args.func(args)
        return args.func(args)
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
