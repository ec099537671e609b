"""Command-line entry point.

Subcommands:
    phantom   generate a synthetic dataset with dense truth and a catalog
    run       execute pipeline stages from a TOML config
    crossval  k-fold cross-validation of the full chain
    evaluate  score a directory of predictions against a directory of truth

Exit codes: 0 success, 2 usage or configuration error, 3 missing stage
prerequisite, 1 internal error.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from . import dataio, evalharness, pipeline
from .errors import (
    ConfigError,
    CosmosegError,
    MissingPrerequisite,
    MissingRange,
    TooFewCases,
    WorkDirLocked,
)
from .phantom import PhantomConfig, generate_phantom, sparsify_annotations

USAGE_ERRORS = (ConfigError, TooFewCases, WorkDirLocked)


def cmd_phantom(args) -> int:
    out = Path(args.out)
    for sub in ("images", "annotations", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.n):
        cfg = PhantomConfig(seed=args.seed + i, annotated_fraction=args.annotated_fraction)
        image, dense = generate_phantom(cfg)
        annotations = sparsify_annotations(dense, cfg.annotated_fraction)
        image_path = out / "images" / f"{image.case_id}.nii.gz"
        ann_path = out / "annotations" / f"{image.case_id}.json"
        gt_path = out / "truth" / f"{image.case_id}.nii.gz"
        dataio.save_volume(image, image_path)
        dataio.save_volume(dense, gt_path)
        dataio.save_annotations(annotations, ann_path)
        records.append(
            dataio.CaseRecord(
                case_id=image.case_id,
                image_path=str(image_path.relative_to(out)),
                annotation_path=str(ann_path.relative_to(out)),
                gt_path=str(gt_path.relative_to(out)),
            )
        )
    folds = dataio.assign_folds([r.case_id for r in records], k=args.folds, seed=args.seed)
    for r in records:
        r.fold_id = folds[r.case_id]
    dataio.save_catalog(records, out / "catalog.csv")
    print(f"wrote {len(records)} cases to {out}")
    return 0


def cmd_run(args) -> int:
    config = pipeline.PipelineConfig.from_file(args.config, work_override=args.work)
    stages = args.stages.split(",") if args.stages else None
    ctx = pipeline.run_pipeline(config, stages)
    done = ",".join(stages or pipeline.STAGES)
    print(f"completed stages [{done}] in {ctx.work_dir}")
    return 0


def cmd_crossval(args) -> int:
    config = pipeline.PipelineConfig.from_file(args.config, work_override=args.work)
    scores = evalharness.run_crossval(
        config.catalog_path, config.settings, config.work_dir, k=args.k
    )
    print(evalharness.render_table(scores), end="")
    print(f"report written to {config.work_dir / 'report'}")
    return 0


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    truth_dir = Path(args.truth)
    if not pred_dir.is_dir() or not truth_dir.is_dir():
        raise ConfigError("--pred and --truth must be existing directories")
    pred_files = sorted(pred_dir.glob("*.nii.gz"))
    if not pred_files:
        raise ConfigError(f"no .nii.gz predictions in {pred_dir}")
    scores = []
    for pred_path in pred_files:
        truth_path = truth_dir / pred_path.name
        if not truth_path.exists():
            raise ConfigError(f"no matching truth for {pred_path.name}")
        pred = dataio.load_labels(pred_path)
        truth = dataio.load_labels(truth_path)
        scope = None
        if args.scope == "annotated":
            if not truth.annotated_range:
                raise MissingRange(
                    f"{truth_path} has no annotated-range sidecar; use --scope full"
                )
            scope = truth.annotated_range
        scores.append(evalharness.evaluate_case(pred, truth, scope))
    scores_by_model = {pred_dir.name: scores}
    out_dir = Path(args.out)
    evalharness.write_report(scores_by_model, out_dir)
    print(evalharness.render_table(scores_by_model), end="")
    print(f"report written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosmoseg",
        description="Label-propagation pipeline for 3D vessel wall segmentation "
        "and per-slice atherosclerosis diagnosis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--annotated-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("run", help="run pipeline stages from a TOML config")
    p.add_argument("--config", required=True, help="TOML configuration file")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(pipeline.STAGES)}")
    p.add_argument("--work", help=f"work directory (default: config or ${pipeline.ENV_WORKDIR})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("crossval", help="k-fold cross-validation of the full chain")
    p.add_argument("--config", required=True, help="TOML configuration file")
    p.add_argument("--work", help="work directory")
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("evaluate", help="score predictions against truth labels")
    p.add_argument("--pred", required=True, help="directory of predicted label volumes")
    p.add_argument("--truth", required=True, help="directory of truth label volumes")
    p.add_argument("--scope", choices=["annotated", "full"], default="full")
    p.add_argument("--out", default="eval-report", help="report output directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CosmosegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
