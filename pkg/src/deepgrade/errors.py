"""Exception hierarchy shared by every pipeline stage."""


class DeepGradeError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(DeepGradeError, ValueError):
    """An input violates a documented precondition."""


class FormatError(DeepGradeError):
    """A file does not follow its binary or JSON layout."""


class DegenerateInputError(DeepGradeError, ValueError):
    """Input is well-formed but mathematically degenerate (zero variance, empty mask)."""


class CoverageError(ValidationError):
    """A patch grid leaves voxels uncovered."""

    def __init__(self, axis, voxel):
        self.axis = axis
        self.voxel = voxel
        super().__init__(f"patch grid leaves voxel index {voxel} uncovered on axis {axis}")


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class ConvergenceError(DeepGradeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class EmptyStructureError(DeepGradeError, ValueError):
    """A structure label has no voxels."""

    def __init__(self, structure_id):
        self.structure_id = structure_id
        super().__init__(f"structure {structure_id} has no voxels")


class IoError(DeepGradeError, OSError):
    """Reading or writing pipeline artifacts failed."""
