"""Exception types raised across the package."""


class NrroomError(Exception):
    """Base class for all package errors."""


class DegenerateGradient(NrroomError):
    """SDF gradient norm underflowed (query on the medial axis)."""


class NoAlbedo(NrroomError):
    """Albedo requested from a geometry-only field."""


class EmptyField(NrroomError):
    """Field has no interior voxel."""


class BadAspect(NrroomError):
    """Equirectangular image is not 2:1."""


class DegenerateRotation(NrroomError):
    """6D rotation with a zero or parallel half."""


class FormatError(NrroomError):
    """Malformed or unsupported file."""


class ValidationError(NrroomError):
    """Scene, pose or config failed validation."""


class NonFiniteLoss(NrroomError):
    """A loss term became NaN or inf during optimization."""

    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        bad = [k for k, v in self.terms.items() if not _finite(v)]
        super().__init__(f"non-finite loss at step {step}: offending {bad}; terms={self.terms}")


def _finite(v):
    try:
        return float(v) == float(v) and abs(float(v)) != float("inf")
    except (TypeError, ValueError):
        return False
