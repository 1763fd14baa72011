"""Exception types shared across the package."""


class SpineLabelError(Exception):
    """Base class for all errors raised by this package."""


class InvalidLabel(SpineLabelError):
    """Vertebra index or name outside the C1..S2 taxonomy."""


class OutOfBounds(SpineLabelError):
    """Physical point lies outside the volume extent."""


class FormatError(SpineLabelError):
    """File could not be parsed as a 3D scalar volume."""


class EmptyProjection(SpineLabelError):
    """Projection slab or box selects no voxels."""


class EmptyDataset(SpineLabelError):
    """Dataset or manifest contains no usable samples."""


class ShapeError(SpineLabelError):
    """Array dimensions incompatible with the requested operation."""


class NoSpineDetected(SpineLabelError):
    """Localizer heatmap has no voxel above the detection threshold."""


class DivergenceError(SpineLabelError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class EmptyOverlap(SpineLabelError):
    """Predicted and true annotation sets share no labels."""
