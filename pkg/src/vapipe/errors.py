"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class CheckpointKindError(DataError):
    """A checkpoint of the wrong model family was supplied."""


class NumericalError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


def check_shape(name, actual, expected):
    """Raise ShapeError unless ``actual`` matches ``expected`` (None = any extent)."""
    actual = tuple(actual)
    ok = len(actual) == len(expected) and all(
        e is None or a == e for a, e in zip(actual, expected)
    )
    if not ok:
        shown = tuple("*" if e is None else e for e in expected)
        raise ShapeError(f"{name}: expected shape {shown}, got {actual}")
