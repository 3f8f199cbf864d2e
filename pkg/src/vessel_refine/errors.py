class RefineError(Exception):
    """Base class for every error raised by vessel_refine."""


class RasterError(RefineError, ValueError):
    pass


class ConfigError(RefineError, ValueError):
    pass


class DataError(RefineError):
    pass


class ShapeError(RefineError, ValueError):
    pass


class DivergenceError(RefineError):
    pass
