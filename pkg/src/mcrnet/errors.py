"""Exception types shared across the package.

The CLI maps these onto process exit codes, so everything user-facing
raises one of the classes below rather than bare ValueError/RuntimeError.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible. Message names both shapes."""


class GeometryError(ValueError):
    """Convolution geometry is invalid (output length < 1, output_pad >= stride, ...)."""


class ConfigError(ValueError):
    """Bad configuration value or unknown config key. CLI exit code 2."""


class FormatError(ValueError):
    """Malformed or truncated binary/CSV artifact. CLI exit code 4."""


class ZeroReferenceError(ValueError):
    """NMSE requested against an all-zero reference signal."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. CLI exit code 3."""

    def __init__(self, iteration: int, last_finite: float):
        self.iteration = iteration
        self.last_finite = last_finite
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(last finite value {last_finite:.6g})"
        )
