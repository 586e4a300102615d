"""Exception types raised by metric_forge.

Every error derives from :class:`MetricForgeError` so callers can catch the
whole family; most also derive from ``ValueError`` because they signal a bad
argument.
"""


class MetricForgeError(Exception):
    """Base class for all library errors."""


class ZeroVector(MetricForgeError, ValueError):
    """A vector's norm fell below the normalization guard."""


class DimensionMismatch(MetricForgeError, ValueError):
    """Operands have incompatible shapes."""


class ShapeMismatch(DimensionMismatch):
    """Gradient blocks that should be combined have different shapes."""


class AllMasked(MetricForgeError, ValueError):
    """A masked softmax row has no unmasked entry."""


class EmptyInput(MetricForgeError, ValueError):
    pass


class NotNormalized(MetricForgeError, ValueError):
    """Input rows were required to be unit-norm but are not."""


class BadBatchStructure(MetricForgeError, ValueError):
    """The batch layout does not match what the loss requires."""


class NoPositive(MetricForgeError, ValueError):
    pass


class NoNegative(MetricForgeError, ValueError):
    pass


class MissingProxy(MetricForgeError, ValueError):
    """A sample's class has no proxy."""


class NonPositiveTemperature(MetricForgeError, ValueError):
    pass


class KOutOfRange(MetricForgeError, ValueError):
    """ProxyGML's K is outside ``[M, M*C]``."""


class DegenerateRow(MetricForgeError, ValueError):
    pass


class DegenerateDirection(MetricForgeError, ValueError):
    """A displacement vector used in a direction cosine is (nearly) zero."""


class NonFiniteLoss(MetricForgeError, ArithmeticError):
    """A loss evaluated to NaN or infinity.

    Attributes:
        step: training step (or ``None`` outside the trainer) at which the
            non-finite value was observed.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InsufficientClasses(MetricForgeError, ValueError):
    """Too few classes with two or more samples for a structured sampler."""


class SingletonClass(MetricForgeError, ValueError):
    pass


class KTooLarge(MetricForgeError, ValueError):
    pass


class ConfigError(MetricForgeError, ValueError):
    """Invalid or unknown configuration value."""


__all__ = [
    "MetricForgeError",
    "ZeroVector",
    "DimensionMismatch",
    "ShapeMismatch",
    "AllMasked",
    "EmptyInput",
    "NotNormalized",
    "BadBatchStructure",
    "NoPositive",
    "NoNegative",
    "MissingProxy",
    "NonPositiveTemperature",
    "KOutOfRange",
    "DegenerateRow",
    "DegenerateDirection",
    "NonFiniteLoss",
    "InsufficientClasses",
    "SingletonClass",
    "KTooLarge",
    "ConfigError",
]
