"""Volume, annotation, and catalog I/O.

Volumes travel as gzip-compressed NIfTI-1 (.nii.gz): images as float32,
labels as uint8.  The codec below covers exactly what this pipeline emits
(single-frame 3D volumes, no scaling, no orientation transforms); spacing is
stored in pixdim and data in the native x-fastest layout, which matches the
in-memory (z, y, x) C order directly.

The source dataset's annotation format is proprietary, so annotations use a
documented JSON schema instead:

    {"case_id": str,
     "entries": [{"side": "L"|"R",
                  "slice_index": int,
                  "status": "normal"|"atherosclerotic",
                  "lumen_contour": [[x, y], ...],
                  "wall_contour": [[x, y], ...]}]}

Contour points are voxel coordinates on the annotated slice (pixel centers
at integers).  Label volumes with annotated-range metadata carry it in a
JSON sidecar next to the .nii.gz, since NIfTI has no field for it.
"""

from __future__ import annotations

import csv
import gzip
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ImageVolume, LabelVolume, SIDES
from .errors import (
    CorruptHeader,
    DegenerateContour,
    DuplicateSlice,
    FileMissing,
    NonFiniteVoxels,
    SchemaViolation,
    TooFewCases,
    WriteFailure,
)

_HDR_SIZE = 348
_VOX_OFFSET = 352
_DT_UINT8 = 2
_DT_FLOAT32 = 16
_MAGIC = b"n+1\x00"


# --------------------------------------------------------------------------
# NIfTI-1 volumes
# --------------------------------------------------------------------------

def _build_header(shape_zyx, spacing_zyx, datatype, bitpix) -> bytes:
    nz, ny, nx = shape_zyx
    dz, dy, dx = spacing_zyx
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scaled voxel axes
    struct.pack_into("<4f", hdr, 280, dx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, dy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, dz, 0)
    hdr[344:348] = _MAGIC
    return bytes(hdr)


def _write_nifti(path: Path, data_zyx: np.ndarray, spacing_zyx, datatype, bitpix):
    hdr = _build_header(data_zyx.shape, spacing_zyx, datatype, bitpix)
    payload = np.ascontiguousarray(data_zyx).tobytes()
    try:
        # fixed mtime and no embedded filename keep reruns byte-identical
        with open(path, "wb") as raw, gzip.GzipFile(
            filename="", fileobj=raw, mode="wb", mtime=0
        ) as f:
            f.write(hdr)
            f.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))  # no extensions
            f.write(payload)
    except OSError as e:
        raise WriteFailure(f"cannot write {path}: {e}") from e


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    if not Path(path).exists():
        raise FileMissing(str(path))
    try:
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rb") as f:
            blob = f.read()
    except (OSError, gzip.BadGzipFile) as e:
        raise CorruptHeader(f"{path}: {e}") from e
    if len(blob) < _VOX_OFFSET:
        raise CorruptHeader(f"{path}: truncated file")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != _HDR_SIZE:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != _HDR_SIZE:
            raise CorruptHeader(f"{path}: bad sizeof_hdr")
    if blob[344:347] not in (b"n+1", b"ni1"):
        raise CorruptHeader(f"{path}: bad magic {blob[344:348]!r}")
    dim = struct.unpack_from(f"{endian}8h", blob, 40)
    if dim[0] < 3 or any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise CorruptHeader(f"{path}: unsupported dim {dim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (datatype,) = struct.unpack_from(f"{endian}h", blob, 70)
    pixdim = struct.unpack_from(f"{endian}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{endian}f", blob, 108)
    slope, inter = struct.unpack_from(f"{endian}2f", blob, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise CorruptHeader(f"{path}: intensity scaling unsupported")
    dtypes = {_DT_UINT8: np.uint8, _DT_FLOAT32: np.float32,
              4: np.int16, 8: np.int32, 64: np.float64}
    if datatype not in dtypes:
        raise CorruptHeader(f"{path}: unsupported datatype {datatype}")
    dt = np.dtype(dtypes[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    start = int(vox_offset)
    if len(blob) - start < count * dt.itemsize:
        raise CorruptHeader(f"{path}: payload shorter than header promises")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=start)
    data = data.reshape(nz, ny, nx)  # x fastest in file == last axis in C order
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return np.ascontiguousarray(data), spacing


def _strip_suffix(path: Path) -> str:
    name = Path(path).name
    for suf in (".nii.gz", ".nii"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return Path(name).stem


def _ranges_sidecar(path) -> Path:
    return Path(str(path) + ".ranges.json")


def load_volume(path) -> ImageVolume:
    """Load an image volume in (z, y, x) order with spacing from the header."""
    data, spacing = _read_nifti(Path(path))
    data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteVoxels(str(path))
    return ImageVolume(data, spacing, case_id=_strip_suffix(path))


def load_labels(path) -> LabelVolume:
    """Load a label volume; picks up the range sidecar when present."""
    data, _ = _read_nifti(Path(path))
    ranges: dict[str, tuple[int, int]] = {}
    sidecar = _ranges_sidecar(path)
    if sidecar.exists():
        raw = json.loads(sidecar.read_text())
        ranges = {side: (int(lo), int(hi)) for side, (lo, hi) in raw.items()}
    return LabelVolume(data.astype(np.uint8), ranges, case_id=_strip_suffix(path))


def save_volume(vol, path) -> None:
    """Save an ImageVolume (float32) or LabelVolume (uint8) as .nii.gz.

    Roundtrips bit-exactly through :func:`load_volume` / :func:`load_labels`.
    Label volumes with annotated ranges get a ``.ranges.json`` sidecar.
    """
    path = Path(path)
    if not path.parent.exists():
        raise WriteFailure(f"parent directory {path.parent} does not exist")
    if isinstance(vol, LabelVolume):
        _write_nifti(path, vol.data.astype(np.uint8), _label_spacing(vol), _DT_UINT8, 8)
        sidecar = _ranges_sidecar(path)
        if vol.annotated_range:
            sidecar.write_text(json.dumps(
                {s: list(r) for s, r in sorted(vol.annotated_range.items())}))
        elif sidecar.exists():
            sidecar.unlink()
    elif isinstance(vol, ImageVolume):
        _write_nifti(path, vol.data.astype(np.float32), vol.spacing, _DT_FLOAT32, 32)
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")


def _label_spacing(labels: LabelVolume) -> tuple[float, float, float]:
    # LabelVolume carries no spacing; unit spacing is recorded in the file
    return (1.0, 1.0, 1.0)


# --------------------------------------------------------------------------
# Sparse annotations
# --------------------------------------------------------------------------

@dataclass
class AnnotationEntry:
    side: str
    slice_index: int
    status: str  # "normal" | "atherosclerotic"
    lumen_contour: np.ndarray  # (N, 2) float, columns (x, y)
    wall_contour: np.ndarray


@dataclass
class SparseAnnotationSet:
    case_id: str
    entries: list[AnnotationEntry] = field(default_factory=list)

    def for_side(self, side: str) -> list[AnnotationEntry]:
        return [e for e in self.entries if e.side == side]

    @property
    def sides(self) -> list[str]:
        return [s for s in SIDES if self.for_side(s)]


def _segments_intersect_pairwise(pts: np.ndarray) -> bool:
    """True if any two non-adjacent edges of the closed polygon intersect."""
    n = len(pts)
    a = pts
    b = np.roll(pts, -1, axis=0)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (
            q[..., 1] - p[..., 1]
        ) * (r[..., 0] - p[..., 0])

    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    # adjacent edges (and self) legitimately share endpoints
    nonadj = (np.abs(i - j) > 1) & (np.abs(i - j) != n - 1) & (j > i)
    if not nonadj.any():
        return False
    d1 = orient(a[:, None], b[:, None], a[None, :])
    d2 = orient(a[:, None], b[:, None], b[None, :])
    d3 = orient(a[None, :], b[None, :], a[:, None])
    d4 = orient(a[None, :], b[None, :], b[:, None])
    proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    # collinear touch: endpoint of one edge on the other edge
    def on_seg(p, q, r, cross):
        within = (
            (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]))
            & (r[..., 0] >= np.minimum(p[..., 0], q[..., 0]))
            & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1]))
            & (r[..., 1] >= np.minimum(p[..., 1], q[..., 1]))
        )
        return (cross == 0) & within

    touch = (
        on_seg(a[:, None], b[:, None], a[None, :], d1)
        | on_seg(a[:, None], b[:, None], b[None, :], d2)
        | on_seg(a[None, :], b[None, :], a[:, None], d3)
        | on_seg(a[None, :], b[None, :], b[:, None], d4)
    )
    return bool(((proper | touch) & nonadj).any())


def _parse_contour(raw, what: str, entry_no: int) -> np.ndarray:
    if not isinstance(raw, list) or any(
        not isinstance(p, list) or len(p) != 2 for p in raw
    ):
        raise SchemaViolation(f"entry {entry_no}: {what} is not a list of [x, y] pairs")
    pts = np.asarray(raw, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateContour(f"entry {entry_no}: {what} has {len(pts)} points")
    if len(pts) > 2 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise DegenerateContour(f"entry {entry_no}: {what} degenerates after closing")
    if _segments_intersect_pairwise(pts):
        raise SchemaViolation(f"entry {entry_no}: {what} is self-intersecting")
    return pts


def load_annotations(path) -> SparseAnnotationSet:
    """Load and validate a sparse annotation file.

    Every schema violation maps to a typed error; entries come back sorted
    by (side, slice_index).
    """
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or "case_id" not in doc or "entries" not in doc:
        raise SchemaViolation(f"{path}: missing case_id or entries")
    if not isinstance(doc["entries"], list):
        raise SchemaViolation(f"{path}: entries is not a list")
    entries = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        if not isinstance(raw, dict):
            raise SchemaViolation(f"entry {i}: not an object")
        missing = {"side", "slice_index", "status", "lumen_contour", "wall_contour"} - set(raw)
        if missing:
            raise SchemaViolation(f"entry {i}: missing fields {sorted(missing)}")
        side = raw["side"]
        if side not in SIDES:
            raise SchemaViolation(f"entry {i}: side must be 'L' or 'R', got {side!r}")
        status = raw["status"]
        if status not in ("normal", "atherosclerotic"):
            raise SchemaViolation(f"entry {i}: bad status {status!r}")
        if not isinstance(raw["slice_index"], int) or raw["slice_index"] < 0:
            raise SchemaViolation(f"entry {i}: slice_index must be a non-negative int")
        key = (side, raw["slice_index"])
        if key in seen:
            raise DuplicateSlice(f"duplicate entry for side {side} slice {key[1]}")
        seen.add(key)
        entries.append(
            AnnotationEntry(
                side=side,
                slice_index=raw["slice_index"],
                status=status,
                lumen_contour=_parse_contour(raw["lumen_contour"], "lumen_contour", i),
                wall_contour=_parse_contour(raw["wall_contour"], "wall_contour", i),
            )
        )
    entries.sort(key=lambda e: (e.side, e.slice_index))
    return SparseAnnotationSet(case_id=str(doc["case_id"]), entries=entries)


def save_annotations(annotations: SparseAnnotationSet, path) -> None:
    doc = {
        "case_id": annotations.case_id,
        "entries": [
            {
                "side": e.side,
                "slice_index": int(e.slice_index),
                "status": e.status,
                "lumen_contour": np.asarray(e.lumen_contour, dtype=float).tolist(),
                "wall_contour": np.asarray(e.wall_contour, dtype=float).tolist(),
            }
            for e in annotations.entries
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc))
    except OSError as e:
        raise WriteFailure(f"cannot write {path}: {e}") from e


# --------------------------------------------------------------------------
# Case catalog
# --------------------------------------------------------------------------

CATALOG_FIELDS = ["case_id", "image_path", "annotation_path", "gt_path", "fold_id"]


@dataclass
class CaseRecord:
    case_id: str
    image_path: str
    annotation_path: str
    gt_path: str = ""  # dense ground truth; phantoms only
    fold_id: int = 0


def assign_folds(case_ids, k: int = 4, seed: int = 0) -> dict[str, int]:
    """Shuffle case ids with a seeded PRNG and deal round-robin into k folds."""
    ids = list(case_ids)
    if len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases cannot fill {k} folds")
    rng = random.Random(seed)
    shuffled = ids[:]
    rng.shuffle(shuffled)
    return {cid: i % k for i, cid in enumerate(shuffled)}


def save_catalog(records, path) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CATALOG_FIELDS)
            w.writeheader()
            for r in records:
                w.writerow(
                    {
                        "case_id": r.case_id,
                        "image_path": r.image_path,
                        "annotation_path": r.annotation_path,
                        "gt_path": r.gt_path,
                        "fold_id": r.fold_id,
                    }
                )
    except OSError as e:
        raise WriteFailure(f"cannot write {path}: {e}") from e


def load_catalog(path) -> list[CaseRecord]:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CATALOG_FIELDS:
            raise SchemaViolation(
                f"{path}: catalog header {reader.fieldnames} != {CATALOG_FIELDS}"
            )
        seen = set()
        for row in reader:
            cid = row["case_id"]
            if cid in seen:
                raise SchemaViolation(f"{path}: duplicate case_id {cid}")
            seen.add(cid)
            try:
                fold = int(row["fold_id"])
            except ValueError as e:
                raise SchemaViolation(f"{path}: bad fold_id {row['fold_id']!r}") from e
            records.append(
                CaseRecord(cid, row["image_path"], row["annotation_path"],
                           row["gt_path"], fold)
            )
    return records
