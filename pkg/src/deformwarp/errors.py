"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    """Raised when corner points cannot determine an affine transform."""


class SingularTransformError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    """A saved forward context does not match the backward call."""


class PoseParseError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration, which):
        super().__init__(f"non-finite {which} at iteration {iteration}")
        self.iteration = iteration
        self.which = which
