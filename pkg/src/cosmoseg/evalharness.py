"""DSC metrics, per-case evaluation, cross-validation, comparison reports.

Scores follow the overlap definition dsc = 2|P∩G| / (|P| + |G|) with integer
set sizes.  When a class is absent from both prediction and truth the score
is "absent" (None) rather than 1.0, and absent classes drop out of averages;
otherwise plaque-free cases would inflate the diseased-wall column.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ClassId,
    LabelVolume,
    SideSplitPlane,
    default_split_plane,
    map_to_tasks,
)
from .errors import CaseSetMismatch, ShapeMismatch

MODEL_A = "Seg-Model-A"
MODEL_B = "Seg-Model-B"

SCORE_FIELDS = [
    "case_id", "model", "dsc_lumen", "dsc_normal_wall", "dsc_diseased_wall",
    "dsc_average",
]

_CLASS_COLUMNS = {
    "dsc_lumen": ClassId.LUMEN,
    "dsc_normal_wall": ClassId.NORMAL_WALL,
    "dsc_diseased_wall": ClassId.DISEASED_WALL,
}


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float | None:
    """Dice similarity of two binary masks; None when both are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} vs {gt_mask.shape}")
    p = int(np.count_nonzero(pred_mask))
    g = int(np.count_nonzero(gt_mask))
    if p == 0 and g == 0:
        return None
    inter = int(np.count_nonzero(pred_mask & gt_mask))
    return 2 * inter / (p + g)


@dataclass
class CaseScore:
    case_id: str
    dsc_lumen: float | None
    dsc_normal_wall: float | None
    dsc_diseased_wall: float | None

    @property
    def dsc_average(self) -> float | None:
        present = [
            v
            for v in (self.dsc_lumen, self.dsc_normal_wall, self.dsc_diseased_wall)
            if v is not None
        ]
        return sum(present) / len(present) if present else None

    def column(self, name: str) -> float | None:
        if name == "dsc_average":
            return self.dsc_average
        return getattr(self, name)


def _scope_mask(
    shape: tuple[int, int, int],
    scope: dict[str, tuple[int, int]] | None,
    plane: SideSplitPlane | None,
) -> np.ndarray | None:
    if scope is None:
        return None
    plane = plane or default_split_plane(shape[2])
    mask = np.zeros(shape, dtype=bool)
    for side, (z_lo, z_hi) in scope.items():
        mask[z_lo : z_hi + 1, :, plane.side_slice(side)] = True
    return mask


def evaluate_case(
    pred: LabelVolume,
    gt: LabelVolume,
    scope: dict[str, tuple[int, int]] | None = None,
    plane: SideSplitPlane | None = None,
) -> CaseScore:
    """Per-class DSC of a predicted label volume against ground truth.

    IGNORE voxels in the truth are excluded from both masks.  ``scope``
    optionally restricts scoring to per-side annotated z-ranges, which is the
    only trusted region when the truth itself was interpolated from sparse
    annotations.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    valid = gt.data != ClassId.IGNORE
    region = _scope_mask(gt.shape, scope, plane)
    if region is not None:
        valid &= region
    values = {}
    for column, cls in _CLASS_COLUMNS.items():
        values[column] = dsc((pred.data == cls) & valid, (gt.data == cls) & valid)
    return CaseScore(pred.case_id or gt.case_id, **values)


def task_dsc(
    pred: LabelVolume, gt: LabelVolume
) -> tuple[float | None, float | None]:
    """DSC of the two segmentation-task masks: lumen, merged vessel wall."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    valid = gt.data != ClassId.IGNORE
    pred_lumen, pred_wall = map_to_tasks(pred)
    gt_lumen, gt_wall = map_to_tasks(gt)
    return (
        dsc(pred_lumen & valid, gt_lumen & valid),
        dsc(pred_wall & valid, gt_wall & valid),
    )


def aggregate_scores(scores: list[CaseScore]) -> dict[str, float | None]:
    """Unweighted mean of per-case scores; absent entries drop out."""
    out: dict[str, float | None] = {}
    for column in list(_CLASS_COLUMNS) + ["dsc_average"]:
        present = [s.column(column) for s in scores if s.column(column) is not None]
        out[column] = sum(present) / len(present) if present else None
    return out


@dataclass
class ComparisonReport:
    """Per-class deltas (B - A) and per-case win counts."""

    deltas: dict[str, float | None]
    wins_b: int
    wins_a: int
    ties: int
    per_case: list[tuple[str, float | None, float | None]] = field(default_factory=list)


def compare_models(
    scores_a: list[CaseScore], scores_b: list[CaseScore]
) -> ComparisonReport:
    by_id_a = {s.case_id: s for s in scores_a}
    by_id_b = {s.case_id: s for s in scores_b}
    if set(by_id_a) != set(by_id_b):
        raise CaseSetMismatch(
            f"case sets differ: {sorted(set(by_id_a) ^ set(by_id_b))}"
        )
    agg_a = aggregate_scores(scores_a)
    agg_b = aggregate_scores(scores_b)
    deltas = {}
    for column in list(_CLASS_COLUMNS) + ["dsc_average"]:
        a, b = agg_a[column], agg_b[column]
        deltas[column] = None if a is None or b is None else b - a
    wins_b = wins_a = ties = 0
    per_case = []
    for cid in sorted(by_id_a):
        a = by_id_a[cid].dsc_average
        b = by_id_b[cid].dsc_average
        per_case.append((cid, a, b))
        if a is None or b is None or a == b:
            ties += 1
        elif b > a:
            wins_b += 1
        else:
            wins_a += 1
    return ComparisonReport(deltas, wins_b, wins_a, ties, per_case)


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------

def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def save_scores_csv(scores_by_model: dict[str, list[CaseScore]], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_FIELDS)
        for model in sorted(scores_by_model):
            for s in sorted(scores_by_model[model], key=lambda s: s.case_id):
                w.writerow(
                    [s.case_id, model, _fmt(s.dsc_lumen), _fmt(s.dsc_normal_wall),
                     _fmt(s.dsc_diseased_wall), _fmt(s.dsc_average)]
                )


def load_scores_csv(path) -> dict[str, list[CaseScore]]:
    out: dict[str, list[CaseScore]] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            score = CaseScore(
                rec["case_id"],
                float(rec["dsc_lumen"]) if rec["dsc_lumen"] else None,
                float(rec["dsc_normal_wall"]) if rec["dsc_normal_wall"] else None,
                float(rec["dsc_diseased_wall"]) if rec["dsc_diseased_wall"] else None,
            )
            out.setdefault(rec["model"], []).append(score)
    return out


def save_aggregate_csv(scores_by_model: dict[str, list[CaseScore]], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model"] + SCORE_FIELDS[2:])
        for model in sorted(scores_by_model):
            agg = aggregate_scores(scores_by_model[model])
            w.writerow([model] + [_fmt(agg[c]) for c in SCORE_FIELDS[2:]])


def render_table(scores_by_model: dict[str, list[CaseScore]]) -> str:
    """Plain-text table of aggregate DSC percentages per model and class."""
    headers = ["Method", "Lumen", "Normal Vessel Wall", "Diseased Vessel Wall", "Average"]
    rows = []
    for model in sorted(scores_by_model):
        agg = aggregate_scores(scores_by_model[model])
        rows.append(
            [model]
            + [
                "absent" if agg[c] is None else f"{100 * agg[c]:.2f}"
                for c in SCORE_FIELDS[2:]
            ]
        )
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_report(
    scores_by_model: dict[str, list[CaseScore]],
    out_dir,
    loss_histories: dict[str, list[float]] | None = None,
) -> list[Path]:
    """Write scores/aggregate CSVs, the text table, and report figures."""
    from . import figures

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    scores_path = out_dir / "scores.csv"
    save_scores_csv(scores_by_model, scores_path)
    written.append(scores_path)
    agg_path = out_dir / "aggregate.csv"
    save_aggregate_csv(scores_by_model, agg_path)
    written.append(agg_path)
    table_path = out_dir / "table.txt"
    table_path.write_text(render_table(scores_by_model))
    written.append(table_path)
    written.append(figures.render_dsc_by_class(scores_by_model, out_dir / "dsc_by_class.png"))
    written.append(figures.render_dsc_per_case(scores_by_model, out_dir / "dsc_per_case.png"))
    if loss_histories:
        written.append(figures.render_loss_curves(loss_histories, out_dir / "loss_curves.png"))
    return written


# --------------------------------------------------------------------------
# Cross-validation
# --------------------------------------------------------------------------

def run_crossval(
    catalog_path,
    settings,
    work_dir,
    k: int = 4,
) -> dict[str, list[CaseScore]]:
    """Train and evaluate the whole A -> propagate -> B chain per fold.

    Each fold gets its own work subdirectory and runs the full stage chain
    with that fold held out, so pseudo labels never leak across folds.  Both
    models are scored on the held-out cases; the pooled per-case scores and
    their aggregate table land in ``work_dir/report``.
    """
    from dataclasses import replace

    from . import pipeline
    from .dataio import load_catalog
    from .errors import MissingFold
    from .segnet import Checkpoint

    work_dir = Path(work_dir)
    records = load_catalog(catalog_path)
    folds = {r.fold_id for r in records}
    for fold in range(k):
        if fold not in folds:
            raise MissingFold(f"fold {fold} has no cases")
    all_scores: dict[str, list[CaseScore]] = {}
    histories: dict[str, list[float]] = {}
    for fold in range(k):
        fold_settings = replace(settings, val_fold=fold, predict_with_model_a=True)
        config = pipeline.PipelineConfig(
            catalog_path=Path(catalog_path),
            work_dir=work_dir / f"fold{fold}",
            settings=fold_settings,
        )
        pipeline.run_pipeline(config)
        fold_scores = load_scores_csv(work_dir / f"fold{fold}" / "report" / "scores.csv")
        for model, scores in fold_scores.items():
            all_scores.setdefault(model, []).extend(scores)
    for model, model_dir in ((MODEL_A, "model_a"), (MODEL_B, "model_b")):
        ckpt = work_dir / "fold0" / model_dir / "checkpoint.pt"
        if ckpt.exists():
            histories[f"{model} (fold 0)"] = Checkpoint.load(ckpt).loss_history
    write_report(all_scores, work_dir / "report", histories)
    return all_scores
