"""Exception and warning types shared across the package.

Every exception carries a short ``code`` string so the CLI can emit a
machine-readable error line without inspecting messages.
"""


class RgbmError(Exception):
    code = "rgbm_error"


class InvalidStateError(RgbmError, ValueError):
    code = "invalid_state"


class StabilityError(RgbmError, ValueError):
    code = "stability_bound"


class NumericalOverflowError(RgbmError, FloatingPointError):
    code = "numerical_overflow"


class DegenerateTotalError(RgbmError, ValueError):
    code = "degenerate_total"


class UsageError(RgbmError, ValueError):
    code = "usage"


class InfeasibleTargetError(RgbmError, ValueError):
    code = "infeasible_target"


class NoStationaryDistributionError(RgbmError, ValueError):
    code = "no_stationary_distribution"


class InfeasibleShareError(RgbmError, ValueError):
    code = "infeasible_share"


class QuadratureError(RgbmError, ArithmeticError):
    code = "quadrature"


class InsufficientDataError(RgbmError, ValueError):
    code = "insufficient_data"


class DataError(RgbmError, ValueError):
    code = "data"


class ParseError(DataError):
    code = "parse"


class ValidationError(DataError):
    code = "validation"


class DuplicateKeyError(DataError):
    code = "duplicate_key"


class EmptyDatasetError(DataError):
    code = "empty_dataset"


class GapError(DataError):
    code = "gap"


class ManifestError(RgbmError, ValueError):
    code = "manifest"


class RgbmWarning(UserWarning):
    pass


class CoarseShareWarning(RgbmWarning):
    """Fewer than one agent in the requested top fraction; one agent is used."""


class NegativeWealthWarning(RgbmWarning):
    """Negative wealths pushed an inequality measure outside its usual range."""


class BoundaryHitWarning(RgbmWarning):
    pass


class ConvergenceWarning(RgbmWarning):
    pass
