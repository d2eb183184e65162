"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class DesmokeError(Exception):
    exit_code = 1


class ArgumentError(DesmokeError, ValueError):
    exit_code = 2


class FormatError(DesmokeError, ValueError):
    exit_code = 4


class ShapeError(DesmokeError, ValueError):
    exit_code = 5


class SizeError(ShapeError):
    """Image too small for the requested window / number of scales."""


class DegenerateError(DesmokeError, ValueError):
    """Transmission or airlight too close to zero for a stable inversion."""

    exit_code = 6


class DivergenceError(DesmokeError, RuntimeError):
    exit_code = 7


# OSError is used as-is for I/O failures; the CLI maps it to this code.
IO_EXIT_CODE = 3
