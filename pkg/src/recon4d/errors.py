class InvalidParameterError(ValueError):
    """Inputs violate a documented precondition."""


class NoValidSlicesError(InvalidParameterError):
    """A reconstruction was requested without any usable slice sample."""


class UndefinedMetricError(ValueError):
    """A similarity metric is undefined for the given inputs (e.g. zero variance)."""


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OutOfGridWarning(UserWarning):
    """A slice samples no grid voxel at all."""


class GeometryWarning(UserWarning):
    """Slice sampling and kernel support are poorly matched."""
