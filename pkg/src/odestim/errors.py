"""Exception hierarchy.

Every error carries a short ``category`` string so the command line can print
a machine-readable tag on stderr.
"""


class OdestimError(Exception):
    category = "error"


class NonFiniteState(OdestimError, ArithmeticError):
    category = "non_finite_state"

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class EmptyTrajectory(OdestimError, ValueError):
    category = "empty_trajectory"


class ShapeMismatch(OdestimError, ValueError):
    category = "shape_mismatch"


class LengthMismatch(OdestimError, ValueError):
    category = "length_mismatch"


class DimensionMismatch(OdestimError, ValueError):
    category = "dimension_mismatch"


class NonPositiveDelta(OdestimError, ValueError):
    category = "non_positive_delta"


class NonPositiveSigma(OdestimError, ValueError):
    category = "non_positive_sigma"


class BadHyperparameter(OdestimError, ValueError):
    category = "bad_hyperparameter"


class NonFiniteGradient(OdestimError, ArithmeticError):
    category = "non_finite_gradient"


class NonFiniteLoss(OdestimError, ArithmeticError):
    category = "non_finite_loss"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyResults(OdestimError, ValueError):
    category = "empty_results"


class UnknownSystem(OdestimError, KeyError):
    category = "unknown_system"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(OdestimError, ValueError):
    category = "parse_error"

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(OdestimError, ValueError):
    category = "config_error"
