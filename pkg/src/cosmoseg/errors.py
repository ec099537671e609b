"""Typed errors raised across the package.

Every failure mode the pipeline can surface is a distinct exception type so
callers (and the CLI exit-code mapping) can react without string matching.
"""


class CosmosegError(Exception):
    """Base class for all package errors."""


# --- volume / label semantics ---------------------------------------------

class ZeroVariance(CosmosegError):
    """Scan intensity is constant; z-score normalization is undefined."""


class PlaneOutOfBounds(CosmosegError):
    """Side-split plane index outside the open interval (0, x_extent)."""


class ShapeMismatch(CosmosegError):
    """Volumes that must be shape-compatible are not."""


# --- file I/O ---------------------------------------------------------------

class FileMissing(CosmosegError):
    """Requested input file does not exist."""


class CorruptHeader(CosmosegError):
    """Volume file header is malformed or uses an unsupported encoding."""


class NonFiniteVoxels(CosmosegError):
    """Loaded image volume contains NaN or Inf."""


class WriteFailure(CosmosegError):
    """Volume or report could not be written."""


class SchemaViolation(CosmosegError):
    """Annotation file does not match the documented JSON schema."""


class DuplicateSlice(CosmosegError):
    """Two annotation entries share the same (side, slice_index)."""


class DegenerateContour(CosmosegError):
    """Contour has fewer than 3 points."""


class TooFewCases(CosmosegError):
    """Not enough cases to fill the requested number of folds."""


# --- label construction ------------------------------------------------------

class LumenOutsideWall(CosmosegError):
    """A rasterized lumen pixel falls outside the wall-contour interior."""


class OutOfBounds(CosmosegError):
    """Contour points fall outside the target grid."""


class EmptyAnnotationSet(CosmosegError):
    """No side has any annotated slice."""


class MissingRange(CosmosegError):
    """Label volume lacks the annotated-range metadata correction needs."""


# --- network / training ------------------------------------------------------

class IncompatiblePatch(CosmosegError):
    """Patch size not divisible by 2**num_downsamplings on every axis."""


class EpochOutOfRange(CosmosegError):
    """Learning-rate schedule queried outside [0, T]."""


class AllIgnored(CosmosegError):
    """Every voxel of a training patch is masked out of the loss."""


class NoUsableVoxels(CosmosegError):
    """Case has no non-ignored voxel to sample a patch from."""


class DivergedLoss(CosmosegError):
    """Training loss became non-finite."""


# --- inference ---------------------------------------------------------------

class WindowLargerThanPaddedVolume(CosmosegError):
    """Internal padding failed to bring the volume up to window size."""


# --- evaluation --------------------------------------------------------------

class CaseSetMismatch(CosmosegError):
    """Two score lists cover different case sets."""


class MissingFold(CosmosegError):
    """Catalog has an empty fold."""


# --- phantom -----------------------------------------------------------------

class GeometryOverflow(CosmosegError):
    """Synthetic vessel would cross the midline or leave the volume."""


class TooFewVesselSlices(CosmosegError):
    """A side has fewer than 2 slices containing vessel."""


# --- orchestration -----------------------------------------------------------

class MissingPrerequisite(CosmosegError):
    """A pipeline stage was requested before its inputs exist."""


class ConfigError(CosmosegError):
    """Pipeline configuration file is invalid."""


class WorkDirLocked(CosmosegError):
    """Another pipeline invocation holds the work-directory lock."""
