"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: input problems (bad files,
bad shapes, bad config) exit 2, non-finite numerics exit 3, tolerance
failures of verification runs exit 4.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value; message names the layer."""


class InputFormatError(ValueError):
    """A file or record does not match its documented format."""


class ToleranceError(AssertionError):
    """A verification run exceeded its error tolerance."""
