"""Exception types raised across scrubkit."""


class ScrubError(Exception):
    """Base class for every error raised by this package."""

    code = "error"


class NonFinite(ScrubError, ValueError):
    code = "non_finite"


class ConvergenceFailure(ScrubError, ArithmeticError):
    code = "convergence_failure"


class Overflow(ScrubError, ArithmeticError):
    code = "overflow"


class InvalidFloor(ScrubError, ValueError):
    code = "invalid_floor"


class DimensionMismatch(ScrubError, ValueError):
    code = "dimension_mismatch"


class SingularCovariance(ScrubError, ValueError):
    code = "singular_covariance"


class InvalidSpec(ScrubError, ValueError):
    code = "invalid_spec"


class EmptyForget(ScrubError, ValueError):
    code = "empty_forget"


class EmptyRetain(ScrubError, ValueError):
    code = "empty_retain"


class NoSuchClass(ScrubError, ValueError):
    code = "no_such_class"


class ParseError(ScrubError, ValueError):
    code = "parse_error"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LabelOutOfRange(ScrubError, ValueError):
    code = "label_out_of_range"


class UnsupportedModel(ScrubError, TypeError):
    code = "unsupported_model"


class Diverged(ScrubError, ArithmeticError):
    code = "diverged"


class SingularA(ScrubError, ValueError):
    code = "singular_a"


class SingularB(ScrubError, ValueError):
    code = "singular_b"


class NotAtMinimum(ScrubError, ValueError):
    code = "not_at_minimum"


class HidingRequiresWholeClass(ScrubError, ValueError):
    code = "hiding_requires_whole_class"


class NoiselessMethod(ScrubError, ValueError):
    code = "noiseless_method"


class DegenerateFit(ScrubError, ValueError):
    code = "degenerate_fit"


class ConfigError(ScrubError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    code = "config_error"

    def __init__(self, key: str, constraint: str):
        self.key = key
        self.constraint = constraint
        super().__init__(f"{key}: {constraint}")
