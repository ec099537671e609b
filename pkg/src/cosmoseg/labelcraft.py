"""Sparse contour annotations -> 3D label volumes, and pseudo-label correction.

Two label sources meet here.  Interpolation turns per-slice contour
annotations into a rough 3D vessel by copying each unlabeled slice from its
nearest annotated neighbor (no blending: every in-range slice is an exact
copy of some rasterized annotation).  Correction overwrites a model's pseudo
labels with those trusted interpolated labels wherever they exist, slice by
slice, side by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassId, LabelVolume, SideSplitPlane, default_split_plane, SIDES
from .dataio import AnnotationEntry, SparseAnnotationSet
from .errors import (
    EmptyAnnotationSet,
    LumenOutsideWall,
    MissingRange,
    OutOfBounds,
    ShapeMismatch,
)


@dataclass
class RasterizedSlice:
    slice_index: int
    side: str
    classes: np.ndarray  # (ny, nx) uint8, values in {0..3}
    status: str


def fill_polygon(points: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Even-odd fill of a closed polygon onto a pixel grid.

    A pixel belongs to the interior iff its center (integer coordinates)
    lies strictly inside under the even-odd rule; centers exactly on an
    edge are boundary, not interior.  The strict rule makes rasterization
    consistent under 90-degree rotations of exactly-representable contours.

    points: (N, 2) float array of (x, y) vertices; closed implicitly.
    grid_shape: (ny, nx).  Returns a bool mask of shape grid_shape.
    """
    pts = np.asarray(points, dtype=np.float64)
    ny, nx = grid_shape
    # work on the polygon's bounding box only
    x_lo = max(int(np.floor(pts[:, 0].min())), 0)
    x_hi = min(int(np.ceil(pts[:, 0].max())) + 1, nx)
    y_lo = max(int(np.floor(pts[:, 1].min())), 0)
    y_hi = min(int(np.ceil(pts[:, 1].max())) + 1, ny)
    mask = np.zeros(grid_shape, dtype=bool)
    if x_lo >= x_hi or y_lo >= y_hi:
        return mask
    yc = np.arange(y_lo, y_hi, dtype=np.float64)[:, None]
    xc = np.arange(x_lo, x_hi, dtype=np.float64)[None, :]
    inside = np.zeros((y_hi - y_lo, x_hi - x_lo), dtype=bool)
    on_edge = np.zeros_like(inside)
    x1s, y1s = pts[:, 0], pts[:, 1]
    x2s, y2s = np.roll(x1s, -1), np.roll(y1s, -1)
    for ax, ay, bx, by in zip(x1s, y1s, x2s, y2s):
        if ay != by:
            crosses = (ay <= yc) != (by <= yc)  # half-open, shared vertices count once
            xcross = ax + (yc - ay) * (bx - ax) / (by - ay)
            inside ^= crosses & (xcross > xc)
        # centers exactly on the segment are boundary
        cross = (bx - ax) * (yc - ay) - (by - ay) * (xc - ax)
        dot = (xc - ax) * (bx - ax) + (yc - ay) * (by - ay)
        seg_len2 = (bx - ax) ** 2 + (by - ay) ** 2
        on_edge |= (cross == 0) & (dot >= 0) & (dot <= seg_len2)
    mask[y_lo:y_hi, x_lo:x_hi] = inside & ~on_edge
    return mask


def rasterize_slice(entry: AnnotationEntry, grid_shape: tuple[int, int]) -> RasterizedSlice:
    """Rasterize one annotation entry to a full-extent 2D class grid.

    Pixels strictly inside the lumen contour become LUMEN; pixels inside the
    wall contour but not lumen become NORMAL_WALL or DISEASED_WALL per the
    slice status; everything else stays BACKGROUND.
    """
    ny, nx = grid_shape
    for name, contour in (("lumen", entry.lumen_contour), ("wall", entry.wall_contour)):
        pts = np.asarray(contour, dtype=np.float64)
        if (pts[:, 0].min() < 0 or pts[:, 0].max() > nx - 1
                or pts[:, 1].min() < 0 or pts[:, 1].max() > ny - 1):
            raise OutOfBounds(
                f"{name} contour of slice {entry.slice_index} leaves the {ny}x{nx} grid"
            )
    lumen = fill_polygon(entry.lumen_contour, grid_shape)
    wall_interior = fill_polygon(entry.wall_contour, grid_shape)
    stray = lumen & ~wall_interior
    if stray.any():
        raise LumenOutsideWall(
            f"slice {entry.slice_index} side {entry.side}: "
            f"{int(stray.sum())} lumen pixels outside the wall interior"
        )
    wall_class = (
        ClassId.NORMAL_WALL if entry.status == "normal" else ClassId.DISEASED_WALL
    )
    classes = np.zeros(grid_shape, dtype=np.uint8)
    classes[wall_interior] = wall_class
    classes[lumen] = ClassId.LUMEN
    return RasterizedSlice(entry.slice_index, entry.side, classes, entry.status)


def _nearest_annotated(z: int, annotated: np.ndarray) -> int:
    """Index of the nearest annotated slice; ties go to the lower index."""
    pos = int(np.searchsorted(annotated, z))
    if pos == 0:
        return int(annotated[0])
    if pos == len(annotated):
        return int(annotated[-1])
    lo, hi = int(annotated[pos - 1]), int(annotated[pos])
    return lo if (z - lo) <= (hi - z) else hi


def interpolate_labels(
    annotations: SparseAnnotationSet,
    vol_shape: tuple[int, int, int],
    plane: SideSplitPlane | None = None,
) -> LabelVolume:
    """Nearest-neighbor interpolation of sparse slice annotations to 3D.

    Per side, every slice between the first and last annotated index gets a
    copy of the rasterization of its nearest annotated slice on that side's
    column range; slices outside that interval (and sides without any
    annotation) are IGNORE.  No extrapolation and no blending.
    """
    nz, ny, nx = vol_shape
    plane = plane or default_split_plane(nx)
    plane.validate(nx)
    if not annotations.entries:
        raise EmptyAnnotationSet(f"case {annotations.case_id!r} has no annotated slice")
    data = np.full(vol_shape, int(ClassId.IGNORE), dtype=np.uint8)
    ranges: dict[str, tuple[int, int]] = {}
    for side in SIDES:
        entries = annotations.for_side(side)
        if not entries:
            continue
        zs = np.array(sorted(e.slice_index for e in entries))
        if zs[-1] >= nz:
            raise OutOfBounds(
                f"side {side}: annotated slice {int(zs[-1])} outside z extent {nz}"
            )
        rasters = {
            e.slice_index: rasterize_slice(e, (ny, nx)).classes for e in entries
        }
        cols = plane.side_slice(side)
        z_lo, z_hi = int(zs[0]), int(zs[-1])
        for z in range(z_lo, z_hi + 1):
            src = rasters[_nearest_annotated(z, zs)]
            data[z, :, cols] = src[:, cols]
        ranges[side] = (z_lo, z_hi)
    return LabelVolume(data, ranges, case_id=annotations.case_id)


def correct_pseudo(
    pseudo: LabelVolume,
    interpolated: LabelVolume,
    plane: SideSplitPlane | None = None,
) -> LabelVolume:
    """Overwrite pseudo labels with trusted interpolated labels in range.

    Within each side's annotated range the interpolated slice region replaces
    the pseudo labels wholesale, background included: annotated slices are
    fully trusted.  Outside the ranges the pseudo labels pass through.  The
    result carries no IGNORE voxels.  ``plane`` must match the one used to
    build the interpolated labels (midline by default).
    """
    if pseudo.shape != interpolated.shape:
        raise ShapeMismatch(
            f"pseudo {pseudo.shape} vs interpolated {interpolated.shape}"
        )
    if not interpolated.annotated_range:
        raise MissingRange("interpolated labels carry no annotated-range metadata")
    if (pseudo.data == ClassId.IGNORE).any():
        raise ValueError("pseudo labels must not contain IGNORE")
    plane = plane or default_split_plane(pseudo.shape[2])
    data = pseudo.data.copy()
    for side, (z_lo, z_hi) in interpolated.annotated_range.items():
        cols = plane.side_slice(side)
        patch = interpolated.data[z_lo : z_hi + 1, :, cols]
        if (patch == ClassId.IGNORE).any():
            raise ValueError(f"side {side}: IGNORE inside its own annotated range")
        data[z_lo : z_hi + 1, :, cols] = patch
    return LabelVolume(data, dict(interpolated.annotated_range), pseudo.case_id)
