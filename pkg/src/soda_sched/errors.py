"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code.
"""


class SodaError(Exception):
    category = "config"


class ConfigError(SodaError, ValueError):
    """Invalid configuration or argument value."""


class RangeError(ConfigError):
    pass


class ShapeError(ConfigError):
    pass


class AbsentCellError(SodaError, KeyError):
    """A table cell that was never populated (e.g. t + n > T)."""

    def __str__(self):
        return Exception.__str__(self)


class MissingDataError(SodaError):
    pass


class NumericError(SodaError, ArithmeticError):
    category = "numeric"


class ScheduleError(NumericError):
    """Noise schedule would divide by zero."""


class InfeasibleError(SodaError):
    category = "infeasible"


class ConstrainedInfeasibleError(InfeasibleError):
    pass


class SaturationError(InfeasibleError):
    def __init__(self, msg, achievable=None):
        super().__init__(msg)
        self.achievable = achievable


class ValidationError(SodaError):
    category = "corruption"


class CorruptionError(ValidationError):
    pass


class UpgradeRequiredError(CorruptionError):
    pass


class ResourceLimitError(SodaError):
    category = "resource"


EXIT_CODES = {
    "config": 2,
    "infeasible": 3,
    "corruption": 4,
    "numeric": 5,
    "resource": 6,
}
