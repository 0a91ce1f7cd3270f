class CastError(Exception):
    """Base class for every error raised by the cast app."""


class ShapeError(CastError):
    pass


class GraphError(CastError):
    pass


class ConfigError(CastError):
    """A run configuration field is missing, unknown or out of range."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateMaskError(CastError):
    """The saliency mask is empty but the crop constraint needs salient pixels."""


class CropBoundsError(CastError):
    pass


class CheckpointError(CastError):
    pass


class SceneFormatError(CastError):
    """A PPM/PGM file or a dataset index line could not be parsed."""


class PoolCoverageError(CastError):
    pass


class DatasetError(CastError):
    pass
