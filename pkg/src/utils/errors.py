"""
Exception hierarchy shared by every module.

Each subclass also derives from the builtin a caller would reach for first,
so `except ValueError` keeps working around validation failures.
"""


class GridRegError(Exception):
    """Root of all errors raised by the registration engine."""


class VolumeFormatError(GridRegError, ValueError):
    """Header/payload of a volume, field or checkpoint file is inconsistent."""


class GeometryError(GridRegError, ValueError):
    """Dimensions, spacings or grid layouts do not agree."""


class ConfigError(GridRegError, ValueError):
    """A configuration value is outside its allowed range."""


class ShapeError(GridRegError, ValueError):
    """Tensor shapes are incompatible for an autodiff primitive."""


class DivergenceError(GridRegError, RuntimeError):
    """An optimisation produced a non-finite loss."""
