"""Paired image/label patch augmentation.

One spatial transform is composed per call (rotation, scaling, elastic
displacement) and applied through a single resampling pass: linear for the
image, nearest for the labels so classes never blend.  Flips and Gaussian
noise act directly on the arrays.  Out-of-bounds image voxels fill with 0;
out-of-bounds label voxels fill with IGNORE since nothing is known there.

Random cropping lives in patch sampling, not here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from ..core import ClassId


@dataclass
class AugmentationConfig:
    flip: bool = True
    flip_axes: tuple[int, ...] = (0, 1, 2)
    rotate: bool = True
    rotate_max_deg: float = 30.0
    scale: bool = True
    scale_range: tuple[float, float] = (0.85, 1.15)
    noise: bool = True
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    elastic: bool = False
    elastic_alpha_range: tuple[float, float] = (0.0, 200.0)
    elastic_sigma_range: tuple[float, float] = (9.0, 13.0)

    def __post_init__(self):
        for name, rng in (
            ("scale_range", self.scale_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("elastic_alpha_range", self.elastic_alpha_range),
            ("elastic_sigma_range", self.elastic_sigma_range),
        ):
            if rng[1] < rng[0]:
                raise ValueError(f"{name} is degenerate: {rng}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(flip=False, rotate=False, scale=False, noise=False, elastic=False)


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    az, ay, ax = angles_rad  # rotations about the z, y, x axes
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(
    image: np.ndarray,
    labels: np.ndarray,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random augmentation draw to a paired (image, label) patch.

    The identical spatial transform hits both arrays; shapes are preserved;
    the result is deterministic for a given generator state.
    """
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} vs labels {labels.shape}")
    image = image.astype(np.float32, copy=True)
    labels = labels.copy()

    if cfg.flip:
        for axis in cfg.flip_axes:
            if rng.random() < 0.5:
                image = np.flip(image, axis)
                labels = np.flip(labels, axis)

    needs_resample = cfg.rotate or cfg.scale or cfg.elastic
    if needs_resample:
        shape = np.array(image.shape, dtype=np.float64)
        center = (shape - 1) / 2
        matrix = np.eye(3)
        if cfg.rotate:
            angles = np.deg2rad(
                rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg, size=3)
            )
            matrix = matrix @ _rotation_matrix(angles)
        if cfg.scale:
            # sampling-grid scaling: factor > 1 zooms in
            factor = rng.uniform(*cfg.scale_range)
            matrix = matrix / factor
        grid = np.indices(image.shape, dtype=np.float64)
        coords = grid.reshape(3, -1) - center[:, None]
        coords = matrix @ coords
        coords += center[:, None]
        if cfg.elastic:
            alpha = rng.uniform(*cfg.elastic_alpha_range)
            sigma = rng.uniform(*cfg.elastic_sigma_range)
            for axis in range(3):
                disp = gaussian_filter(
                    rng.uniform(-1, 1, size=image.shape), sigma, mode="constant"
                )
                coords[axis] += (alpha * disp).ravel()
        image = map_coordinates(
            image, coords, order=1, mode="constant", cval=0.0
        ).reshape(image.shape).astype(np.float32)
        labels = map_coordinates(
            labels, coords, order=0, mode="constant", cval=int(ClassId.IGNORE)
        ).reshape(labels.shape)

    if cfg.noise:
        sigma = rng.uniform(*cfg.noise_sigma_range)
        if sigma > 0:
            image = image + rng.normal(0.0, sigma, size=image.shape).astype(np.float32)

    return np.ascontiguousarray(image), np.ascontiguousarray(labels)
