"""Exception hierarchy shared by all maskvol modules."""


class MaskvolError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""


class ValidationError(MaskvolError, ValueError):
    pass


class ShapeMismatch(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class OutOfImage(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class EmptyCloud(ValidationError):
    pass


class DegenerateRay(ValidationError):
    pass


class DegenerateInterval(ValidationError):
    pass


class BudgetTooLarge(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericError(MaskvolError, ArithmeticError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class GraphNotRecorded(MaskvolError, RuntimeError):
    pass


class FormatError(MaskvolError, IOError):
    pass
