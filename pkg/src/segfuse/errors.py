"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data and
file-format problems exit 2, numeric failures exit 3.
"""


class SegfuseError(Exception):
    pass


class DimensionError(SegfuseError):
    """Operand shapes are incompatible."""


class NumericError(SegfuseError):
    """Non-finite values or a numerically invalid request."""


class GraphError(SegfuseError):
    """The recorded computation graph is malformed (e.g. contains a cycle)."""


class ConfigError(SegfuseError):
    """A configuration value violates its documented constraints."""


class SizeError(SegfuseError):
    """An image or grid size violates a divisibility requirement."""


class FormatError(SegfuseError):
    """A binary file failed validation. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataError(SegfuseError):
    """Required input data is missing or inconsistent."""


class TrainingError(SegfuseError):
    """Optimization failed. Carries the iteration at which it failed."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
