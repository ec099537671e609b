"""Synthetic bilateral vessel phantoms with dense truth and sparse annotations.

Each phantom holds two tubes (one per side of the midline) whose centerline
wiggles sinusoidally along z.  A cross-section is a lumen disk inside a wall
annulus; plaque segments thicken the annulus over a contiguous z span and an
angular arc, and that thickened arc carries the diseased-wall class.  All
cross-sections are star-convex about the centerline by construction, so
contour tracing and rasterization invert each other exactly.

Intensities only loosely mimic black-blood contrast: lumen dark, wall mid,
plaque bright, background darkest, plus Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .core import ClassId, ImageVolume, LabelVolume, SideSplitPlane, default_split_plane, SIDES
from .dataio import AnnotationEntry, SparseAnnotationSet
from .errors import GeometryOverflow, TooFewVesselSlices


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 128, 128)  # (z, y, x)
    spacing: tuple[float, float, float] = (0.6, 0.6, 0.6)
    z_margin: int = 4
    centerline_amplitude: float = 5.0  # voxels
    centerline_frequency: float = 1.0  # cycles over the vessel extent
    lumen_radius_range: tuple[float, float] = (3.5, 5.5)
    wall_thickness_range: tuple[float, float] = (2.5, 3.5)
    plaque_count: int = 2  # per side
    plaque_span_range: tuple[int, int] = (8, 14)  # slices
    plaque_arc_deg: float = 140.0
    plaque_boost_range: tuple[float, float] = (1.5, 2.5)  # extra wall voxels
    intensity_background: float = 0.03
    intensity_lumen: float = 0.22
    intensity_wall: float = 0.55
    intensity_plaque: float = 0.85
    noise_sigma: float = 0.04
    annotated_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lumen_radius_range[0] <= 0 or self.wall_thickness_range[0] <= 0:
            raise ValueError("radii and thickness must be positive")
        if not 0 < self.annotated_fraction <= 1:
            raise ValueError("annotated_fraction must be in (0, 1]")


@dataclass
class _Tube:
    """Per-slice geometry of one vessel: centers, radii, plaque arcs."""

    cx: np.ndarray
    cy: np.ndarray
    lumen_r: np.ndarray
    wall_r: np.ndarray
    plaque: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    # plaque entries: (z_start, z_stop, arc_center_rad, arc_half_rad, boost)


def _build_tube(cfg: PhantomConfig, rng: np.random.Generator, x_anchor: float) -> _Tube:
    nz = cfg.shape[0]
    z = np.arange(nz, dtype=np.float64)
    extent = nz - 2 * cfg.z_margin
    phase = rng.uniform(0, 2 * math.pi, size=3)
    omega = 2 * math.pi * cfg.centerline_frequency / max(extent, 1)
    cx = x_anchor + cfg.centerline_amplitude * np.sin(omega * z + phase[0])
    cy = cfg.shape[1] / 2 + cfg.centerline_amplitude * np.cos(omega * z + phase[1])
    r_lo, r_hi = cfg.lumen_radius_range
    r_mid, r_amp = (r_lo + r_hi) / 2, (r_hi - r_lo) / 2
    lumen_r = r_mid + r_amp * np.sin(1.7 * omega * z + phase[2])
    w_lo, w_hi = cfg.wall_thickness_range
    w_mid, w_amp = (w_lo + w_hi) / 2, (w_hi - w_lo) / 2
    wall_r = lumen_r + w_mid + w_amp * np.cos(1.3 * omega * z + phase[2])
    tube = _Tube(cx, cy, lumen_r, wall_r)
    z_lo, z_hi = cfg.z_margin, nz - cfg.z_margin
    for _ in range(cfg.plaque_count):
        span = int(rng.integers(cfg.plaque_span_range[0], cfg.plaque_span_range[1] + 1))
        span = min(span, z_hi - z_lo)
        start = int(rng.integers(z_lo, z_hi - span + 1))
        arc_center = rng.uniform(0, 2 * math.pi)
        arc_half = math.radians(cfg.plaque_arc_deg) / 2
        boost = rng.uniform(*cfg.plaque_boost_range)
        tube.plaque.append((start, start + span, arc_center, arc_half, boost))
    return tube


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + math.pi) % (2 * math.pi) - math.pi


def _tube_slice(
    tube: _Tube, cfg: PhantomConfig, z: int, yy, xx
) -> tuple[np.ndarray, np.ndarray]:
    """One tube on one slice: (class map, plaque-bump mask), both full-grid.

    A slice inside any plaque span carries the diseased class on its whole
    wall ring, matching the one-status-per-slice annotation scheme; the bump
    mask marks the thickened arc, which is where the bright plaque intensity
    goes.
    """
    nz = cfg.shape[0]
    out = np.zeros(yy.shape, dtype=np.uint8)
    bump = np.zeros(yy.shape, dtype=bool)
    if not (cfg.z_margin <= z < nz - cfg.z_margin):
        return out, bump
    dx = xx - tube.cx[z]
    dy = yy - tube.cy[z]
    rho = np.hypot(dx, dy)
    lumen_r, wall_r = tube.lumen_r[z], tube.wall_r[z]
    outer = np.full(yy.shape, wall_r)
    in_plaque_span = False
    theta = np.arctan2(dy, dx)
    for z0, z1, arc_center, arc_half, boost in tube.plaque:
        if not z0 <= z < z1:
            continue
        in_plaque_span = True
        delta = np.abs(_wrap_angle(theta - arc_center))
        # taper the boost near the arc edges so the outline stays clean
        ramp = np.clip((arc_half - delta) / math.radians(15.0), 0.0, 1.0)
        in_arc = delta <= arc_half
        outer = np.maximum(outer, wall_r + boost * ramp * in_arc)
        bump |= in_arc & (rho >= wall_r * 0.6)
    wall_band = (rho >= lumen_r) & (rho < outer)
    wall_class = ClassId.DISEASED_WALL if in_plaque_span else ClassId.NORMAL_WALL
    out[wall_band] = wall_class
    out[rho < lumen_r] = ClassId.LUMEN
    bump &= wall_band
    return out, bump


def generate_phantom(cfg: PhantomConfig) -> tuple[ImageVolume, LabelVolume]:
    """Deterministically generate one phantom scan with dense truth labels."""
    rng = np.random.default_rng(cfg.seed)
    nz, ny, nx = cfg.shape
    midline = nx // 2
    tubes = {
        "L": _build_tube(cfg, rng, x_anchor=nx / 4),
        "R": _build_tube(cfg, rng, x_anchor=3 * nx / 4),
    }
    # reject geometry that could cross the midline or leave the volume
    for side, tube in tubes.items():
        hot = slice(cfg.z_margin, nz - cfg.z_margin)
        max_r = tube.wall_r[hot].max() + max(cfg.plaque_boost_range)
        x_min = tube.cx[hot].min() - max_r
        x_max = tube.cx[hot].max() + max_r
        y_min = tube.cy[hot].min() - max_r
        y_max = tube.cy[hot].max() + max_r
        bounds = (0, midline) if side == "L" else (midline, nx)
        if x_min < bounds[0] + 1 or x_max > bounds[1] - 1:
            raise GeometryOverflow(
                f"side {side}: vessel x-range [{x_min:.1f}, {x_max:.1f}] "
                f"leaves its side {bounds}"
            )
        if y_min < 1 or y_max > ny - 2:
            raise GeometryOverflow(f"side {side}: vessel leaves the volume in y")
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    plaque_bump = np.zeros(cfg.shape, dtype=bool)
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    for tube in tubes.values():
        for z in range(nz):
            tube_classes, bump = _tube_slice(tube, cfg, z, yy, xx)
            labels[z] = np.where(tube_classes > 0, tube_classes, labels[z])
            plaque_bump[z] |= bump
    # intensity by tissue: both wall classes share the wall level, only the
    # thickened plaque arc is bright
    means = np.array(
        [cfg.intensity_background, cfg.intensity_lumen, cfg.intensity_wall,
         cfg.intensity_wall],
        dtype=np.float32,
    )
    image = means[labels]
    image[plaque_bump] = cfg.intensity_plaque
    image = image + rng.normal(0, cfg.noise_sigma, size=cfg.shape).astype(np.float32)
    case_id = f"phantom{cfg.seed:04d}"
    return (
        ImageVolume(image, cfg.spacing, case_id),
        LabelVolume(labels, {}, case_id),
    )


def expected_slice_statuses(cfg: PhantomConfig) -> dict[tuple[str, int], str]:
    """Per-(side, slice) status straight from the generating geometry.

    Rebuilds the tube parameters from the seed and reads plaque spans and the
    vessel extent directly, with no voxel counting: an independent reference
    for diagnosis checks.
    """
    rng = np.random.default_rng(cfg.seed)
    nz, ny, nx = cfg.shape
    tubes = {
        "L": _build_tube(cfg, rng, x_anchor=nx / 4),
        "R": _build_tube(cfg, rng, x_anchor=3 * nx / 4),
    }
    statuses = {}
    for side, tube in tubes.items():
        for z in range(nz):
            if not (cfg.z_margin <= z < nz - cfg.z_margin):
                statuses[(side, z)] = "no-vessel"
            elif any(z0 <= z < z1 for z0, z1, *_ in tube.plaque):
                statuses[(side, z)] = "atherosclerotic"
            else:
                statuses[(side, z)] = "normal"
    return statuses


# --------------------------------------------------------------------------
# Sparsification: dense truth -> contour annotations on a band of slices
# --------------------------------------------------------------------------

def _trace_mask(mask: np.ndarray) -> np.ndarray:
    """Outer contour of a filled star-convex mask as (N, 2) (x, y) points."""
    contours = measure.find_contours(mask.astype(np.float64), 0.5)
    if not contours:
        raise TooFewVesselSlices("mask has no contour")
    contour = max(contours, key=len)  # (row=y, col=x) order
    pts = contour[:, ::-1].copy()
    if np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    return pts


def sparsify_annotations(
    dense: LabelVolume,
    fraction: float,
    seed: int = 0,
    plane: SideSplitPlane | None = None,
) -> SparseAnnotationSet:
    """Keep a contiguous band of annotated slices per side.

    The band covers ceil(fraction * vessel-extent) slices centered on the
    vessel midpoint, mirroring annotations that cluster around the carotid
    bifurcation.  Per selected slice, lumen and outer-wall contours are traced
    from the dense labels and the status is atherosclerotic iff the slice
    contains any diseased-wall voxel on that side.  ``seed`` is accepted for
    interface symmetry; band selection is deterministic.
    """
    del seed
    nz, ny, nx = dense.shape
    plane = plane or default_split_plane(nx)
    entries = []
    for side in SIDES:
        cols = plane.side_slice(side)
        region = dense.data[:, :, cols]
        vessel = np.isin(region, (1, 2, 3))
        vessel_z = np.where(vessel.any(axis=(1, 2)))[0]
        if len(vessel_z) < 2:
            raise TooFewVesselSlices(f"side {side}: {len(vessel_z)} vessel slices")
        n_band = math.ceil(fraction * len(vessel_z))
        mid = (vessel_z[0] + vessel_z[-1]) // 2
        band_lo = int(np.clip(mid - n_band // 2, vessel_z[0], vessel_z[-1] - n_band + 1))
        band = [int(z) for z in vessel_z if band_lo <= z < band_lo + n_band]
        for z in band:
            outer_mask = np.zeros((ny, nx), dtype=bool)
            outer_mask[:, cols] = vessel[z]
            lumen_mask = np.zeros((ny, nx), dtype=bool)
            lumen_mask[:, cols] = region[z] == ClassId.LUMEN
            wall_pts = _trace_mask(outer_mask)
            lumen_pts = _trace_mask(lumen_mask)
            has_plaque = bool((region[z] == ClassId.DISEASED_WALL).any())
            entries.append(
                AnnotationEntry(
                    side=side,
                    slice_index=z,
                    status="atherosclerotic" if has_plaque else "normal",
                    lumen_contour=lumen_pts,
                    wall_contour=wall_pts,
                )
            )
    entries.sort(key=lambda e: (e.side, e.slice_index))
    return SparseAnnotationSet(case_id=dense.case_id, entries=entries)
