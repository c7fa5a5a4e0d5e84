"""Exception types shared across the package."""


class ShapedetError(Exception):
    """Base class for all package-specific errors."""


class MismatchedCardinality(ShapedetError):
    """Two correspondence sets do not have the same number of points."""


class DegenerateConfiguration(ShapedetError):
    """Point set is collinear or coincident; no unique rotation exists."""


class NearDegenerateSpectrum(ShapedetError):
    """Singular values of the cross-covariance are too close for a stable
    closed-form alignment gradient."""


class EmptyCohort(ShapedetError):
    """An operation over a cohort of shapes received zero shapes."""


class EmptyMask(ShapedetError):
    """A binary mask volume contains no foreground voxels."""


class CenterOutOfBounds(ShapedetError):
    """A bounding-box center lies outside the volume."""


class DuplicateClass(ShapedetError):
    """More than one bounding box was supplied for the same anatomy class."""


class ShapeMismatch(ShapedetError):
    """Array arguments have incompatible shapes."""


class BadDims(ShapedetError):
    """Volume dimensions are not divisible by the required stride."""


class EmptyIntersection(ShapedetError):
    """A bounding box does not intersect the volume at all."""


class AnatomyMismatch(ShapedetError):
    """Anatomy indices of paired arguments disagree."""


class NonFiniteLoss(ShapedetError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


class SpecInfeasible(ShapedetError):
    """A synthetic data specification cannot be satisfied (shape does not fit)."""


class CorruptFile(ShapedetError):
    """A data file failed to parse; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigMismatch(ShapedetError):
    """Checkpoint, dataset, and template configurations disagree."""


class SingularTps(ShapedetError):
    """Thin-plate-spline system is singular (coincident control points)."""


class EmptyMesh(ShapedetError):
    """A mesh with no faces or vertices where a surface is required."""
