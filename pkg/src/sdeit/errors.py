"""Exception types shared across the toolkit.

Each failure class named by an operation contract gets its own type so
callers (and the CLI exit-code mapping) can tell them apart.
"""


class SdeitError(Exception):
    """Base class for all toolkit errors."""


class MeshLayoutError(SdeitError):
    """Requested electrode layout cannot fit on the domain boundary."""


class MeshParseError(SdeitError):
    """Mesh or measurement file does not parse against its schema."""


class MeshInvariantError(SdeitError):
    """A structural invariant of a mesh fails; message names the first offender."""


class AssemblyError(SdeitError):
    """FEM system cannot be assembled (degenerate element, zero-measure electrode)."""


class NumericError(SdeitError):
    """A numeric computation failed (non-finite values, solver residual too large)."""


class DimensionMismatchError(SdeitError):
    """Array arguments have inconsistent shapes."""


class ConstantImageError(SdeitError):
    """A metric is undefined because an image has zero variance."""


class GuidanceError(SdeitError):
    """Base class for guidance-provider failures."""


class GuidanceTransportError(GuidanceError):
    """Endpoint unreachable or connection dropped."""


class GuidanceTimeoutError(GuidanceError):
    """No response within the configured timeout."""


class GuidanceStatusError(GuidanceError):
    """Non-2xx HTTP status from the guidance service."""

    def __init__(self, status_code: int, detail: str = ""):
        self.status_code = status_code
        super().__init__(f"guidance service returned status {status_code}: {detail}")


class GuidanceBodyError(GuidanceError):
    """Response body is malformed (not JSON, missing keys, wrong pixel count)."""


class GuidanceInvariantError(GuidanceError):
    """Response violates the guidance contract (dimensions or [0,1] range)."""
