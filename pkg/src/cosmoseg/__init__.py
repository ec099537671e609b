"""Label propagation for 3D carotid vessel wall segmentation and diagnosis.

Sparse 2D contour annotations are interpolated into rough 3D labels, a first
model trained on single-side scans generates pseudo labels that trusted
annotations correct, and a second model re-trained on the propagated labels
performs final segmentation and per-slice atherosclerosis diagnosis.
"""

from .core import (
    ClassId,
    ImageVolume,
    LabelVolume,
    SideSplitPlane,
    default_split_plane,
    map_to_tasks,
    merge_sides,
    normalize_zscore,
    split_sides,
)

__version__ = "0.1.0"

__all__ = [
    "ClassId",
    "ImageVolume",
    "LabelVolume",
    "SideSplitPlane",
    "default_split_plane",
    "normalize_zscore",
    "split_sides",
    "merge_sides",
    "map_to_tasks",
    "__version__",
]
