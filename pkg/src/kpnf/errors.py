"""Exception hierarchy shared across the package.

Every error raised deliberately by kpnf derives from :class:`KpnfError` so
callers (and the CLI) can distinguish validation failures from numerical
failures without string matching.
"""


class KpnfError(Exception):
    """Base class for all kpnf errors."""


class InputValidationError(KpnfError):
    """Malformed or out-of-contract input (CLI exit code 2)."""


class NumericalError(KpnfError):
    """Numerical failure: non-finite values, failed gradient checks (CLI exit code 3)."""


# --- diffcore ---------------------------------------------------------------

class ShapeMismatchError(InputValidationError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteValueError(NumericalError):
    """A forward op produced NaN or Inf."""


class NonScalarRootError(InputValidationError):
    """backward() was called on a non-scalar node."""


class NonDeterministicFunctionError(NumericalError):
    """Two forward passes of a supposedly deterministic function disagreed."""


# --- geometry ---------------------------------------------------------------

class BehindCameraError(InputValidationError):
    """Projected point is at or behind the camera plane (depth <= eps)."""


class PixelOutOfBoundsError(InputValidationError):
    """Requested pixel lies outside the image rectangle."""


class TriangulationError(InputValidationError):
    """Triangulation could not produce a well-defined point."""


class FewerThanTwoViewsError(TriangulationError):
    """A keypoint is observed in fewer than two usable views."""


class DegenerateGeometryError(TriangulationError):
    """Observing geometry admits no unique solution (no parallax)."""


class InvalidCameraError(InputValidationError):
    """Camera fields violate their invariants."""


# --- encoding ---------------------------------------------------------------

class MissingCanonicalFrameError(InputValidationError):
    """Canonical-xyz encoding requested without a canonical frame."""


class EmptyKeypointSetError(InputValidationError):
    """A keypoint-based operation received zero keypoints."""


# --- scenes / io ------------------------------------------------------------

class SceneFormatError(InputValidationError):
    """Scene directory or scene.json violates the documented schema."""


class ImageFormatError(InputValidationError):
    """Unreadable or out-of-contract image file."""


# --- training ---------------------------------------------------------------

class EmptyMaskError(InputValidationError):
    """A masked reduction received an all-zero mask."""


class TrainingDivergedError(NumericalError):
    """Loss became non-finite; a diagnostic checkpoint was written."""
