"""Sliding-window prediction, pseudo-label generation, per-slice diagnosis.

Large volumes are tiled with overlapping windows; per-window softmax
probabilities are blended with Gaussian weights (heavier near the window
center) and renormalized, so the result is a convex combination of window
predictions at every voxel.  Volumes smaller than the window are zero-padded
symmetrically and cropped back afterward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    ClassId,
    ImageVolume,
    LabelVolume,
    SideSplitPlane,
    default_split_plane,
    normalize_zscore,
    SIDES,
)
from .dataio import SparseAnnotationSet
from .errors import WindowLargerThanPaddedVolume
from .labelcraft import correct_pseudo, interpolate_labels
from .segnet.training import Checkpoint

STATUS_NORMAL = "normal"
STATUS_DISEASED = "atherosclerotic"
STATUS_NO_VESSEL = "no-vessel"

DIAGNOSIS_FIELDS = [
    "case_id", "side", "slice_index", "status", "diseased_voxels", "wall_voxels",
]


@dataclass
class SlidingWindowConfig:
    window_size: tuple[int, int, int] = (96, 160, 160)
    overlap: float = 0.5
    blending: str = "gaussian"  # or "uniform"
    sigma_scale: float = 1.0 / 8.0

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blending not in ("gaussian", "uniform"):
            raise ValueError(f"unknown blending {self.blending!r}")


def window_starts(extent: int, window: int, overlap: float) -> list[int]:
    """Window offsets along one axis: fixed stride, last window clamped."""
    if window > extent:
        raise WindowLargerThanPaddedVolume(f"window {window} > extent {extent}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def _blend_weights(cfg: SlidingWindowConfig) -> np.ndarray:
    w = np.ones(cfg.window_size, dtype=np.float32)
    if cfg.blending == "gaussian":
        for axis, size in enumerate(cfg.window_size):
            center = (size - 1) / 2.0
            sigma = max(size * cfg.sigma_scale, 1e-3)
            prof = np.exp(-0.5 * ((np.arange(size) - center) / sigma) ** 2)
            shape = [1, 1, 1]
            shape[axis] = size
            w = w * prof.reshape(shape).astype(np.float32)
        w = np.maximum(w, w.max() * 1e-6)
    return w


def sliding_window_predict(
    model: torch.nn.Module,
    vol: ImageVolume,
    cfg: SlidingWindowConfig,
) -> np.ndarray:
    """Predict class probabilities for a whole (normalized) volume.

    Returns a (4, z, y, x) float32 array; probabilities sum to 1 per voxel.
    """
    data = vol.data
    pads = []
    for axis, w in enumerate(cfg.window_size):
        short = max(0, w - data.shape[axis])
        pads.append((short // 2, short - short // 2))
    padded = (
        np.pad(data, pads, mode="constant", constant_values=0.0)
        if any(p != (0, 0) for p in pads)
        else data
    )
    num_classes = 0
    shape = padded.shape
    starts = [
        window_starts(shape[a], cfg.window_size[a], cfg.overlap) for a in range(3)
    ]
    weights = _blend_weights(cfg)
    accum = None
    norm = np.zeros(shape, dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for z0 in starts[0]:
            for y0 in starts[1]:
                for x0 in starts[2]:
                    sel = (
                        slice(z0, z0 + cfg.window_size[0]),
                        slice(y0, y0 + cfg.window_size[1]),
                        slice(x0, x0 + cfg.window_size[2]),
                    )
                    patch = torch.from_numpy(
                        np.ascontiguousarray(padded[sel], dtype=np.float32)
                    )[None, None]
                    scores = model(patch)
                    if isinstance(scores, list):  # deep supervision: take full res
                        scores = scores[0]
                    probs = torch.softmax(scores, dim=1)[0].numpy()
                    if accum is None:
                        num_classes = probs.shape[0]
                        accum = np.zeros((num_classes,) + shape, dtype=np.float32)
                    accum[(slice(None),) + sel] += probs * weights[None]
                    norm[sel] += weights
    if accum is None or (norm == 0).any():
        raise WindowLargerThanPaddedVolume("window tiling left voxels uncovered")
    accum /= norm[None]
    crop = tuple(
        slice(p[0], p[0] + data.shape[a]) for a, p in enumerate(pads)
    )
    return accum[(slice(None),) + crop]


def predict_labels(probs: np.ndarray, case_id: str = "") -> LabelVolume:
    """Argmax decode; exact ties go to the lower class id; never IGNORE."""
    return LabelVolume(np.argmax(probs, axis=0).astype(np.uint8), {}, case_id)


def predict_case_sides(
    model: torch.nn.Module,
    vol: ImageVolume,
    cfg: SlidingWindowConfig,
    plane: SideSplitPlane | None = None,
) -> np.ndarray:
    """Whole-scan probabilities from a model trained on single-side scans.

    Each half is normalized and predicted independently, then the probability
    volumes are stitched back along x.
    """
    from .core import split_sides  # local import keeps module load cheap

    plane = plane or default_split_plane(vol.shape[2])
    left, right = split_sides(vol, plane)
    parts = [
        sliding_window_predict(model, normalize_zscore(half), cfg)
        for half in (left, right)
    ]
    return np.concatenate(parts, axis=3)


def generate_pseudo_labels(
    checkpoint: Checkpoint,
    vol: ImageVolume,
    annotations: SparseAnnotationSet,
    cfg: SlidingWindowConfig | None = None,
    plane: SideSplitPlane | None = None,
) -> LabelVolume:
    """Propagate sparse annotations to the whole scan.

    The single-side model predicts each half, halves are merged, decoded to
    classes, and finally corrected against the interpolated labels: within
    every annotated range the trusted labels win bit-for-bit.
    """
    plane = plane or default_split_plane(vol.shape[2])
    cfg = cfg or SlidingWindowConfig(window_size=checkpoint.train_cfg.patch_size)
    interpolated = interpolate_labels(annotations, vol.shape, plane)
    model = checkpoint.build()
    probs = predict_case_sides(model, vol, cfg, plane)
    pseudo = predict_labels(probs, vol.case_id)
    return correct_pseudo(pseudo, interpolated, plane)


# --------------------------------------------------------------------------
# Per-slice diagnosis
# --------------------------------------------------------------------------

@dataclass
class DiagnosisRow:
    side: str
    slice_index: int
    status: str
    diseased_voxels: int
    wall_voxels: int


@dataclass
class SliceDiagnosisReport:
    case_id: str
    rows: list[DiagnosisRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(DIAGNOSIS_FIELDS)
            for r in self.rows:
                w.writerow(
                    [self.case_id, r.side, r.slice_index, r.status,
                     r.diseased_voxels, r.wall_voxels]
                )

    @classmethod
    def from_csv(cls, path) -> "SliceDiagnosisReport":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = []
            case_id = ""
            for rec in reader:
                case_id = rec["case_id"]
                rows.append(
                    DiagnosisRow(
                        rec["side"], int(rec["slice_index"]), rec["status"],
                        int(rec["diseased_voxels"]), int(rec["wall_voxels"]),
                    )
                )
        return cls(case_id, rows)


def diagnose_slices(
    labels: LabelVolume,
    plane: SideSplitPlane | None = None,
    tau: int = 1,
) -> SliceDiagnosisReport:
    """Classify every single-side slice as normal/atherosclerotic/no-vessel.

    A slice is atherosclerotic when it contains at least ``tau`` diseased-wall
    voxels on that side (tau=1 reads the rule literally: containment).  Slices
    with no wall voxels at all are no-vessel.
    """
    if (labels.data == ClassId.IGNORE).any():
        raise ValueError("diagnosis input must not contain IGNORE")
    plane = plane or default_split_plane(labels.shape[2])
    plane.validate(labels.shape[2])
    rows = []
    for side in SIDES:
        region = labels.data[:, :, plane.side_slice(side)]
        diseased = (region == ClassId.DISEASED_WALL).sum(axis=(1, 2))
        wall = diseased + (region == ClassId.NORMAL_WALL).sum(axis=(1, 2))
        for z in range(labels.shape[0]):
            d, w = int(diseased[z]), int(wall[z])
            if d >= tau:
                status = STATUS_DISEASED
            elif w > 0:
                status = STATUS_NORMAL
            else:
                status = STATUS_NO_VESSEL
            rows.append(DiagnosisRow(side, z, status, d, w))
    return SliceDiagnosisReport(labels.case_id, rows)
