"""Training-patch extraction with foreground oversampling.

Patches always come out at exactly the configured size: volumes smaller than
the patch on any axis are zero-padded and the padding joins the ignore mask.
With the configured probability the patch is centered on a random vessel
voxel (classes 1-3), which keeps the tiny foreground from drowning in
background patches.
"""

from __future__ import annotations

import numpy as np

from ..core import ClassId
from ..errors import NoUsableVoxels


def sample_patch(
    image: np.ndarray,
    labels: np.ndarray,
    patch_size: tuple[int, int, int],
    foreground_oversample_prob: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one (image, labels, ignore_mask) patch of exactly ``patch_size``."""
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} vs labels {labels.shape}")
    if not (labels != ClassId.IGNORE).any():
        raise NoUsableVoxels("every voxel is IGNORE")

    use_foreground = rng.random() < foreground_oversample_prob
    if use_foreground:
        fg = np.argwhere((labels >= 1) & (labels <= 3))
        if len(fg):
            center = fg[rng.integers(len(fg))]
        else:
            use_foreground = False
    if not use_foreground:
        center = np.array([rng.integers(d) for d in image.shape])

    starts, pads = [], []
    for axis, p in enumerate(patch_size):
        d = image.shape[axis]
        if d >= p:
            start = int(np.clip(center[axis] - p // 2, 0, d - p))
            starts.append(start)
            pads.append((0, 0))
        else:
            starts.append(0)
            lo = (p - d) // 2
            pads.append((lo, p - d - lo))
    sel = tuple(slice(s, s + p) for s, p in zip(starts, patch_size))
    sel = tuple(
        slice(s.start, min(s.stop, d)) for s, d in zip(sel, image.shape)
    )
    img = image[sel]
    lbl = labels[sel]
    if any(p != (0, 0) for p in pads):
        img = np.pad(img, pads, mode="constant", constant_values=0.0)
        lbl = np.pad(lbl, pads, mode="constant", constant_values=int(ClassId.IGNORE))
    ignore = lbl == ClassId.IGNORE
    return (
        np.ascontiguousarray(img, dtype=np.float32),
        np.ascontiguousarray(lbl, dtype=np.uint8),
        ignore,
    )
