"""Exception types shared across the package."""


class SGSpinError(Exception):
    """Base class for all package errors."""


class InvalidGeometry(SGSpinError):
    """Device dimensions or magnetization violate the geometry contract."""


class QuadratureFailure(SGSpinError):
    """Adaptive panel quadrature could not reach the requested tolerance.

    Carries the achieved estimate and an error bound so callers can decide
    whether the partial result is still usable.
    """

    def __init__(self, message, estimate=None, error_bound=None):
        super().__init__(message)
        self.estimate = estimate
        self.error_bound = error_bound


class OutOfBounds(SGSpinError):
    """Requested point lies outside the field-grid corridor."""


class ZeroField(SGSpinError):
    """Operation undefined for |B| = 0."""


class DegenerateAxis(SGSpinError):
    """Torque axis undefined: moment is (anti)parallel to the field."""


class SingularOrientation(SGSpinError):
    """|sin phi| below the singularity threshold; switch working frame."""


class StepRejected(SGSpinError):
    """Integrator produced a non-finite or out-of-range state."""


class NonForwardMotion(SGSpinError):
    """Detector projection needs v_x > 0."""


class ParseError(SGSpinError):
    """Config file is not well-formed JSON."""


class ValidationError(SGSpinError):
    """Config file violates the schema (unknown key or bad value)."""
