"""Exception hierarchy shared by all digeo modules."""


class DigeoError(Exception):
    """Base class for every error raised by the library."""


class ParseError(DigeoError):
    """Malformed OBJ input."""


class NonManifoldError(DigeoError):
    """An edge is shared by three or more faces."""


class DegenerateFaceError(DigeoError):
    """A face has (numerically) zero area or repeated vertex indices."""


class NumericalStall(DigeoError):
    """A geodesic step could not advance (no positive exit parameter)."""


class BoundaryHit(DigeoError):
    """Tracing reached the mesh boundary and hole avoidance is disabled."""


class DegenerateDirection(DigeoError):
    """A tangent vector is too short to define a direction frame."""


class PerturbationEscaped(DigeoError):
    """A finite-difference perturbation left the mesh while the base trace did not."""


class NotOnSphere(DigeoError):
    pass


class NotTangent(DigeoError):
    pass


class StepTooLarge(DigeoError):
    """RK4 energy drift exceeded the allowed tolerance."""


class MaxIterations(DigeoError):
    pass


class LineSearchFailed(DigeoError):
    pass


class EmptyCell(DigeoError):
    pass


class CurvatureBreakdown(DigeoError):
    pass


class InvalidArgs(DigeoError):
    """Command-line arguments are inconsistent or out of range."""
