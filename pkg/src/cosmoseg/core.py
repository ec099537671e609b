"""Volumetric data types and label-semantics operations shared by all modules.

Axis order is (z, y, x) everywhere in this package; file I/O reorders to this
convention at ingestion.  Label volumes use the class scheme

    0 background, 1 lumen, 2 normal wall, 3 diseased wall, 4 ignore

where IGNORE marks voxels without trusted supervision (slices outside the
annotated range); it is masked out of the training loss and never appears in
final predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import PlaneOutOfBounds, ShapeMismatch, ZeroVariance

SIDES = ("L", "R")


class ClassId(IntEnum):
    BACKGROUND = 0
    LUMEN = 1
    NORMAL_WALL = 2
    DISEASED_WALL = 3
    IGNORE = 4


#: classes the segmentation network predicts (IGNORE is never predicted)
NUM_CLASSES = 4

#: classes that count as vessel foreground
FOREGROUND_CLASSES = (ClassId.LUMEN, ClassId.NORMAL_WALL, ClassId.DISEASED_WALL)


@dataclass
class ImageVolume:
    """A 3D scalar scan: data indexed (z, y, x), spacing (dz, dy, dx) in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"image volume must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("image volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Voxelwise class map plus per-side annotated z-range metadata.

    ``annotated_range`` maps side ("L"/"R") to an inclusive slice interval
    [z_lo, z_hi] inside which labels were interpolated from trusted
    annotations.  Sides without annotations are simply absent.
    """

    data: np.ndarray
    annotated_range: dict[str, tuple[int, int]] = field(default_factory=dict)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"label volume must be 3D, got shape {self.data.shape}")
        if self.data.size and self.data.max() > int(ClassId.IGNORE):
            raise ValueError("label volume contains class ids outside {0..4}")
        nz = self.data.shape[0]
        for side, rng in self.annotated_range.items():
            if side not in SIDES:
                raise ValueError(f"unknown side {side!r}")
            z_lo, z_hi = rng
            if not (0 <= z_lo <= z_hi < nz):
                raise ValueError(f"annotated range {rng} outside z extent {nz}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SideSplitPlane:
    """Sagittal split between the left and right carotid; axis fixed to x."""

    index: int
    axis: str = "x"

    def validate(self, x_extent: int) -> None:
        if not 0 < self.index < x_extent:
            raise PlaneOutOfBounds(
                f"split index {self.index} not inside (0, {x_extent})"
            )

    def side_slice(self, side: str) -> slice:
        """Column range a side occupies: L is x < index, R is x >= index."""
        return slice(0, self.index) if side == "L" else slice(self.index, None)


def default_split_plane(x_extent: int) -> SideSplitPlane:
    """Midline split; anatomically sufficient for bilateral carotids."""
    return SideSplitPlane(index=x_extent // 2)


def normalize_zscore(vol: ImageVolume) -> ImageVolume:
    """Normalize a scan to zero mean and unit population standard deviation."""
    data = vol.data.astype(np.float64)
    mean = data.mean()
    std = data.std()  # population std, deterministic for tiny arrays
    if std < 1e-8:
        raise ZeroVariance(f"scan {vol.case_id!r} is constant (std={std:g})")
    out = ((data - mean) / std).astype(np.float32)
    return ImageVolume(out, vol.spacing, vol.case_id)


def _split_array(data: np.ndarray, plane: SideSplitPlane) -> tuple[np.ndarray, np.ndarray]:
    plane.validate(data.shape[2])
    return data[:, :, : plane.index].copy(), data[:, :, plane.index :].copy()


def split_sides(vol, plane: SideSplitPlane):
    """Split a whole scan into single-side scans at the given x plane.

    Left half covers x in [0, index), right half x in [index, X).  Works on
    both ImageVolume and LabelVolume; label metadata is filtered to the side
    each half contains.
    """
    if isinstance(vol, ImageVolume):
        left, right = _split_array(vol.data, plane)
        return (
            ImageVolume(left, vol.spacing, vol.case_id),
            ImageVolume(right, vol.spacing, vol.case_id),
        )
    if isinstance(vol, LabelVolume):
        left, right = _split_array(vol.data, plane)
        ranges = vol.annotated_range
        return (
            LabelVolume(left, {k: v for k, v in ranges.items() if k == "L"}, vol.case_id),
            LabelVolume(right, {k: v for k, v in ranges.items() if k == "R"}, vol.case_id),
        )
    raise TypeError(f"cannot split {type(vol).__name__}")


def merge_sides(left, right, plane: SideSplitPlane):
    """Exact inverse of :func:`split_sides`."""
    if type(left) is not type(right):
        raise ShapeMismatch("halves must be the same volume type")
    ldata, rdata = left.data, right.data
    if ldata.shape[0] != rdata.shape[0] or ldata.shape[1] != rdata.shape[1]:
        raise ShapeMismatch(f"half shapes {ldata.shape} and {rdata.shape} disagree")
    if ldata.shape[2] != plane.index:
        raise ShapeMismatch(
            f"left half x-extent {ldata.shape[2]} != plane index {plane.index}"
        )
    data = np.concatenate([ldata, rdata], axis=2)
    plane.validate(data.shape[2])
    if isinstance(left, ImageVolume):
        if left.spacing != right.spacing:
            raise ShapeMismatch("half spacings disagree")
        return ImageVolume(data, left.spacing, left.case_id)
    ranges = dict(left.annotated_range)
    ranges.update(right.annotated_range)
    return LabelVolume(data, ranges, left.case_id)


def map_to_tasks(labels: LabelVolume) -> tuple[np.ndarray, np.ndarray]:
    """Collapse classes to the two segmentation-task masks.

    Lumen mask is class 1; wall mask covers both wall classes (2 and 3),
    which are one structure for the segmentation task.  IGNORE voxels land
    in neither mask.
    """
    data = labels.data
    lumen = data == ClassId.LUMEN
    wall = (data == ClassId.NORMAL_WALL) | (data == ClassId.DISEASED_WALL)
    return lumen, wall
