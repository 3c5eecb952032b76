"""Exception and warning types shared across the package."""


class ProcDifError(Exception):
    """Base class for errors raised by procdif."""


class ConfigError(ProcDifError, ValueError):
    """Invalid configuration value.

    ``field`` carries the dotted path of the offending field when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class DataError(ProcDifError, ValueError):
    """Input data violate a structural requirement."""


class NumericalError(ProcDifError, ArithmeticError):
    """A numerical routine could not produce a valid result."""


class RankDeficientError(NumericalError):
    """Design matrix is not of full column rank."""

    def __init__(self, dependent_columns, names=None):
        self.dependent_columns = list(dependent_columns)
        if names is not None:
            labels = [names[i] for i in self.dependent_columns]
        else:
            labels = [str(i) for i in self.dependent_columns]
        super().__init__(
            "design matrix is rank deficient; linearly dependent columns: "
            + ", ".join(labels)
        )


class ConditionNotMetError(NumericalError):
    """The closed-form existence condition fails; use the numeric optimizer."""


class DegenerateGeometryError(NumericalError):
    """Projected response and group vectors are collinear or vanish."""


class VarianceFloorWarning(RuntimeWarning):
    """Residual variance hit the numerical floor (near-exact fit)."""


class SeparationWarning(RuntimeWarning):
    """Linear predictor exceeded the cap; the binary-response fit is flagged."""


class HeywoodWarning(RuntimeWarning):
    """A factor-model uniqueness was floored."""
