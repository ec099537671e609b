"""File-based pipeline stages and their orchestration.

Stage artifacts are plain files in a work directory:

    work/
      interpolated/<case>.nii.gz   nearest-neighbor interpolated labels
      model_a/checkpoint.pt        single-side model (interpolated labels)
      propagated/<case>.nii.gz     corrected pseudo labels
      model_b/checkpoint.pt        whole-scan model (propagated labels)
      predictions/<model>/<case>.nii.gz
      diagnosis/<case>.csv
      report/                      scores, tables, figures
      manifest.json                config hash + per-stage provenance

Stages run in the fixed order interpolate -> train-a -> propagate ->
train-b -> infer -> diagnose -> evaluate; each one checks that its inputs
exist and is idempotent for unchanged inputs and seed.  Training cases are
the catalog folds other than ``val_fold``; inference and evaluation run on
the held-out fold.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import dataio
from .core import ImageVolume, default_split_plane, normalize_zscore, split_sides
from .errors import ConfigError, MissingPrerequisite, WorkDirLocked
from .evalharness import MODEL_A, MODEL_B, CaseScore, evaluate_case, write_report
from .inference import (
    SlidingWindowConfig,
    diagnose_slices,
    generate_pseudo_labels,
    predict_case_sides,
    predict_labels,
    sliding_window_predict,
)
from .labelcraft import interpolate_labels
from .segnet import AugmentationConfig, Checkpoint, TrainingCase, TrainingConfig, UNet3DConfig, train

STAGES = ["interpolate", "train-a", "propagate", "train-b", "infer", "diagnose", "evaluate"]

ENV_WORKDIR = "COSMOSSEG_WORKDIR"


# --------------------------------------------------------------------------
# Configuration profiles
# --------------------------------------------------------------------------

@dataclass
class PipelineSettings:
    """Everything a stage needs beyond the catalog and work directory."""

    unet_cfg: UNet3DConfig
    train_cfg: TrainingConfig
    aug_cfg: AugmentationConfig
    sw_cfg: SlidingWindowConfig
    seed: int = 0
    val_fold: int = 0
    tau: int = 1
    predict_with_model_a: bool = False

    def config_hash(self) -> str:
        doc = {
            "unet": asdict(self.unet_cfg),
            "train": asdict(self.train_cfg),
            "aug": asdict(self.aug_cfg),
            "sw": asdict(self.sw_cfg),
            "seed": self.seed,
            "val_fold": self.val_fold,
            "tau": self.tau,
            "predict_with_model_a": self.predict_with_model_a,
        }
        blob = json.dumps(doc, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_settings(seed: int = 0) -> PipelineSettings:
    """Desk-scale profile: structurally the full pipeline, sized for a laptop."""
    return PipelineSettings(
        unet_cfg=UNet3DConfig(num_downsamplings=3, base_channels=8, max_channels=64),
        train_cfg=TrainingConfig(
            patch_size=(32, 64, 64),
            batch_size=2,
            lr0=0.01,
            epochs=40,
            iterations_per_epoch=10,
            seed=seed,
        ),
        aug_cfg=AugmentationConfig(
            flip=True, rotate=False, scale=False, noise=True,
            noise_sigma_range=(0.0, 0.05), elastic=False,
        ),
        sw_cfg=SlidingWindowConfig(window_size=(32, 64, 64)),
        seed=seed,
    )


def paper_settings(seed: int = 0) -> PipelineSettings:
    """Full-scale profile sized for real scans on an accelerator."""
    return PipelineSettings(
        unet_cfg=UNet3DConfig(num_downsamplings=5, base_channels=32, max_channels=320),
        train_cfg=TrainingConfig(
            patch_size=(96, 160, 160),
            batch_size=2,
            lr0=0.01,
            epochs=500,
            iterations_per_epoch=250,
            seed=seed,
        ),
        aug_cfg=AugmentationConfig(),
        sw_cfg=SlidingWindowConfig(window_size=(96, 160, 160)),
        seed=seed,
    )


PROFILES = {"desk": desk_settings, "paper": paper_settings}


# --------------------------------------------------------------------------
# TOML-subset config files
#
# The runtime here ships no TOML parser (stdlib tomllib arrived in 3.11),
# so this reads the subset the pipeline config uses: top-level keys,
# [tables], strings, ints, floats, booleans, and flat arrays.
# --------------------------------------------------------------------------

def _parse_toml_value(raw: str, where: str):
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"{where}: empty value")
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw == "true":
        return True
    if raw == "false":
        return False
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_value(p, where) for p in inner.split(",")]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from None


def _strip_comment(line: str) -> str:
    out = []
    in_string = False
    for ch in line:
        if ch == '"':
            in_string = not in_string
        if ch == "#" and not in_string:
            break
        out.append(ch)
    return "".join(out)


def parse_toml(text: str) -> dict:
    doc: dict = {}
    table = doc
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{where}: empty table name")
            table = doc.setdefault(name, {})
            if not isinstance(table, dict):
                raise ConfigError(f"{where}: {name!r} already used as a key")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().strip('"')
        if not key:
            raise ConfigError(f"{where}: empty key")
        table[key] = _parse_toml_value(value, where)
    return doc


def _apply_overrides(cfg, overrides: dict, section: str):
    if not overrides:
        return cfg
    fields = {f for f in cfg.__dataclass_fields__}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    coerced = {}
    for key, value in overrides.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return replace(cfg, **coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from e


@dataclass
class PipelineConfig:
    """Parsed run configuration: catalog + work dir + profile + overrides."""

    catalog_path: Path
    work_dir: Path
    settings: PipelineSettings
    profile: str = "desk"

    @classmethod
    def from_file(cls, path, work_override=None) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        doc = parse_toml(path.read_text())
        profile = doc.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        settings = PROFILES[profile](seed=seed)
        settings = replace(
            settings,
            unet_cfg=_apply_overrides(settings.unet_cfg, doc.get("model", {}), "model"),
            train_cfg=_apply_overrides(settings.train_cfg, doc.get("training", {}), "training"),
            aug_cfg=_apply_overrides(settings.aug_cfg, doc.get("augment", {}), "augment"),
            sw_cfg=_apply_overrides(settings.sw_cfg, doc.get("inference", {}), "inference"),
        )
        settings = replace(settings, train_cfg=replace(settings.train_cfg, seed=seed))
        if "val_fold" in doc:
            settings = replace(settings, val_fold=int(doc["val_fold"]))
        if "tau" in doc:
            settings = replace(settings, tau=int(doc["tau"]))
        if "predict_with_model_a" in doc:
            settings = replace(settings, predict_with_model_a=bool(doc["predict_with_model_a"]))
        if "catalog" not in doc:
            raise ConfigError("config must name a catalog CSV via 'catalog'")
        catalog_path = Path(doc["catalog"])
        if not catalog_path.is_absolute():
            catalog_path = path.parent / catalog_path
        work = work_override or doc.get("work_dir") or os.environ.get(ENV_WORKDIR)
        if work is None:
            raise ConfigError(
                "no work directory: set work_dir in the config, pass --work, "
                f"or export {ENV_WORKDIR}"
            )
        work = Path(work)
        if not work.is_absolute() and work_override is None and "work_dir" in doc:
            work = path.parent / work
        return cls(catalog_path=catalog_path, work_dir=work, settings=settings, profile=profile)


# --------------------------------------------------------------------------
# Stage context and helpers
# --------------------------------------------------------------------------

@dataclass
class PipelineContext:
    work_dir: Path
    catalog: list[dataio.CaseRecord]
    catalog_dir: Path
    settings: PipelineSettings
    manifest: dict = field(default_factory=dict)

    @property
    def train_records(self):
        return [r for r in self.catalog if r.fold_id != self.settings.val_fold]

    @property
    def val_records(self):
        return [r for r in self.catalog if r.fold_id == self.settings.val_fold]

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        return p if p.is_absolute() else self.catalog_dir / p

    def dir(self, name: str) -> Path:
        d = self.work_dir / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def interpolated_path(self, case_id: str) -> Path:
        return self.work_dir / "interpolated" / f"{case_id}.nii.gz"

    def propagated_path(self, case_id: str) -> Path:
        return self.work_dir / "propagated" / f"{case_id}.nii.gz"

    def checkpoint_path(self, model_dir: str) -> Path:
        return self.work_dir / model_dir / "checkpoint.pt"

    def prediction_path(self, model_dir: str, case_id: str) -> Path:
        return self.work_dir / "predictions" / model_dir / f"{case_id}.nii.gz"

    def record_stage(self, stage: str) -> None:
        self.manifest.setdefault("stages", {})[stage] = {
            "config_hash": self.settings.config_hash(),
            "deterministic": self.settings.train_cfg.num_workers <= 1,
        }
        self.manifest["config_hash"] = self.settings.config_hash()
        self.manifest["seed"] = self.settings.seed
        path = self.work_dir / "manifest.json"
        path.write_text(json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")


def make_context(config: PipelineConfig) -> PipelineContext:
    catalog = dataio.load_catalog(config.catalog_path)
    ctx = PipelineContext(
        work_dir=Path(config.work_dir),
        catalog=catalog,
        catalog_dir=Path(config.catalog_path).parent,
        settings=config.settings,
    )
    manifest_path = ctx.work_dir / "manifest.json"
    if manifest_path.exists():
        ctx.manifest = json.loads(manifest_path.read_text())
    return ctx


def _load_case_image(ctx: PipelineContext, record: dataio.CaseRecord) -> ImageVolume:
    vol = dataio.load_volume(ctx.resolve(record.image_path))
    vol.case_id = record.case_id
    return vol


def _load_case_annotations(ctx, record) -> dataio.SparseAnnotationSet:
    return dataio.load_annotations(ctx.resolve(record.annotation_path))


def _require(path: Path, stage: str, needed_by: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(
            f"stage {needed_by!r} needs {path} (run stage {stage!r} first)"
        )
    return path


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_interpolate(ctx: PipelineContext) -> None:
    out = ctx.dir("interpolated")
    for record in ctx.catalog:
        vol = _load_case_image(ctx, record)
        annotations = _load_case_annotations(ctx, record)
        labels = interpolate_labels(annotations, vol.shape)
        dataio.save_volume(labels, out / f"{record.case_id}.nii.gz")
    ctx.record_stage("interpolate")


def _train_stage(ctx: PipelineContext, cases, model_dir: str, train_cfg: TrainingConfig) -> None:
    model_out = ctx.dir(model_dir)
    checkpoint = train(cases, ctx.settings.unet_cfg, train_cfg, ctx.settings.aug_cfg)
    checkpoint.save(model_out / "checkpoint.pt")
    (model_out / "loss_history.csv").write_text(checkpoint.history_csv())


def stage_train_a(ctx: PipelineContext) -> None:
    """Train the single-side model on interpolated labels."""
    cases = []
    for record in ctx.train_records:
        _require(ctx.interpolated_path(record.case_id), "interpolate", "train-a")
        vol = _load_case_image(ctx, record)
        labels = dataio.load_labels(ctx.interpolated_path(record.case_id))
        plane = default_split_plane(vol.shape[2])
        img_halves = split_sides(vol, plane)
        lbl_halves = split_sides(labels, plane)
        for side, img_half, lbl_half in zip(("L", "R"), img_halves, lbl_halves):
            cases.append(
                TrainingCase(
                    f"{record.case_id}_{side}",
                    normalize_zscore(img_half).data,
                    lbl_half.data,
                )
            )
    train_cfg = replace(ctx.settings.train_cfg, seed=ctx.settings.seed)
    _train_stage(ctx, cases, "model_a", train_cfg)
    ctx.record_stage("train-a")


def stage_propagate(ctx: PipelineContext) -> None:
    """Generate corrected pseudo labels for the training cases."""
    ckpt_path = _require(ctx.checkpoint_path("model_a"), "train-a", "propagate")
    checkpoint = Checkpoint.load(ckpt_path)
    out = ctx.dir("propagated")
    for record in ctx.train_records:
        vol = _load_case_image(ctx, record)
        annotations = _load_case_annotations(ctx, record)
        propagated = generate_pseudo_labels(checkpoint, vol, annotations, ctx.settings.sw_cfg)
        dataio.save_volume(propagated, out / f"{record.case_id}.nii.gz")
    ctx.record_stage("propagate")


def stage_train_b(ctx: PipelineContext) -> None:
    """Re-train on whole scans with propagated labels."""
    cases = []
    for record in ctx.train_records:
        _require(ctx.propagated_path(record.case_id), "propagate", "train-b")
        vol = _load_case_image(ctx, record)
        labels = dataio.load_labels(ctx.propagated_path(record.case_id))
        cases.append(
            TrainingCase(record.case_id, normalize_zscore(vol).data, labels.data)
        )
    # distinct sampling stream from model A; reproducibility contract unchanged
    train_cfg = replace(ctx.settings.train_cfg, seed=ctx.settings.seed + 1)
    _train_stage(ctx, cases, "model_b", train_cfg)
    ctx.record_stage("train-b")


def stage_infer(ctx: PipelineContext) -> None:
    """Sliding-window inference on the held-out cases with the re-trained model."""
    ckpt_path = _require(ctx.checkpoint_path("model_b"), "train-b", "infer")
    checkpoint = Checkpoint.load(ckpt_path)
    model = checkpoint.build()
    out_b = ctx.dir("predictions/model_b")
    for record in ctx.val_records:
        vol = _load_case_image(ctx, record)
        probs = sliding_window_predict(model, normalize_zscore(vol), ctx.settings.sw_cfg)
        labels = predict_labels(probs, record.case_id)
        dataio.save_volume(labels, out_b / f"{record.case_id}.nii.gz")
    if ctx.settings.predict_with_model_a:
        ckpt_a = _require(ctx.checkpoint_path("model_a"), "train-a", "infer")
        model_a = Checkpoint.load(ckpt_a).build()
        out_a = ctx.dir("predictions/model_a")
        for record in ctx.val_records:
            vol = _load_case_image(ctx, record)
            probs = predict_case_sides(model_a, vol, ctx.settings.sw_cfg)
            labels = predict_labels(probs, record.case_id)
            dataio.save_volume(labels, out_a / f"{record.case_id}.nii.gz")
    ctx.record_stage("infer")


def stage_diagnose(ctx: PipelineContext) -> None:
    """Per-slice atherosclerosis report from the re-trained model's labels."""
    out = ctx.dir("diagnosis")
    for record in ctx.val_records:
        pred_path = _require(
            ctx.prediction_path("model_b", record.case_id), "infer", "diagnose"
        )
        labels = dataio.load_labels(pred_path)
        report = diagnose_slices(labels, tau=ctx.settings.tau)
        report.to_csv(out / f"{record.case_id}.csv")
    ctx.record_stage("diagnose")


def _case_truth(ctx: PipelineContext, record: dataio.CaseRecord):
    """Ground truth and scoring scope for one case.

    Dense truth (phantoms) scores the full volume; otherwise the interpolated
    labels stand in, restricted to their annotated ranges.
    """
    if record.gt_path:
        return dataio.load_labels(ctx.resolve(record.gt_path)), None
    path = _require(ctx.interpolated_path(record.case_id), "interpolate", "evaluate")
    truth = dataio.load_labels(path)
    return truth, truth.annotated_range


def stage_evaluate(ctx: PipelineContext) -> None:
    """Score predictions against truth; write CSVs, table, and figures."""
    model_dirs = {MODEL_B: "model_b"}
    if ctx.prediction_path("model_a", "").parent.exists():
        model_dirs[MODEL_A] = "model_a"
    scores_by_model: dict[str, list[CaseScore]] = {}
    for model_name, model_dir in model_dirs.items():
        scores = []
        for record in ctx.val_records:
            pred_path = _require(
                ctx.prediction_path(model_dir, record.case_id), "infer", "evaluate"
            )
            pred = dataio.load_labels(pred_path)
            truth, scope = _case_truth(ctx, record)
            scores.append(evaluate_case(pred, truth, scope))
        scores_by_model[model_name] = scores
    histories = {}
    for model_name, model_dir in model_dirs.items():
        ckpt = ctx.checkpoint_path(model_dir)
        if ckpt.exists():
            histories[model_name] = Checkpoint.load(ckpt).loss_history
    write_report(scores_by_model, ctx.work_dir / "report", histories)
    ctx.record_stage("evaluate")


_STAGE_FUNCS = {
    "interpolate": stage_interpolate,
    "train-a": stage_train_a,
    "propagate": stage_propagate,
    "train-b": stage_train_b,
    "infer": stage_infer,
    "diagnose": stage_diagnose,
    "evaluate": stage_evaluate,
}


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------

class _WorkDirLock:
    """Exclusive advisory lock; concurrent runs on one work dir are rejected."""

    def __init__(self, work_dir: Path):
        self.path = Path(work_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkDirLocked(
                f"{self.path} exists; another run is active (or crashed: delete it)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def run_pipeline(config: PipelineConfig, stages: list[str] | None = None) -> PipelineContext:
    """Run the requested stages (all of them by default) in canonical order."""
    requested = stages or STAGES
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; valid: {STAGES}")
    ordered = [s for s in STAGES if s in requested]
    config.work_dir.mkdir(parents=True, exist_ok=True)
    ctx = make_context(config)
    with _WorkDirLock(config.work_dir):
        for stage in ordered:
            _STAGE_FUNCS[stage](ctx)
    return ctx
