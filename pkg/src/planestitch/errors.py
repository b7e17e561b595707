"""Exception types shared across the package.

Each error carries a short machine-readable ``code`` that the CLI uses for
its diagnostic prefix and exit status.
"""


class StitchError(Exception):
    code = "stitch-error"
    exit_status = 1


class DegenerateQuad(StitchError, ValueError):
    code = "degenerate-quad"
    exit_status = 4


class PointAtInfinity(StitchError, ValueError):
    code = "point-at-infinity"
    exit_status = 4


class DimensionMismatch(StitchError, ValueError):
    code = "dimension-mismatch"


class EmptyImage(StitchError, ValueError):
    code = "empty-image"


class ImageTooSmall(StitchError, ValueError):
    code = "image-too-small"


class InsufficientMatches(StitchError):
    code = "insufficient-matches"
    exit_status = 2


class NoConsensus(StitchError):
    code = "no-consensus"
    exit_status = 2


class NonFiniteObjective(StitchError, ArithmeticError):
    code = "non-finite-objective"


class SingularSystem(StitchError, ValueError):
    code = "singular-system"


class FoldedMesh(StitchError, ValueError):
    code = "folded-mesh"


class CanvasMismatch(StitchError, ValueError):
    code = "canvas-mismatch"


class EmptyOverlap(StitchError, ValueError):
    code = "empty-overlap"


class ZeroLengthEdge(StitchError, ValueError):
    code = "zero-length-edge"


class ConfigError(StitchError, ValueError):
    code = "config"
    exit_status = 4


class FormatError(StitchError, OSError):
    """Unreadable or malformed input file."""

    code = "io"
    exit_status = 3
