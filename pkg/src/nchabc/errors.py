"""Exception hierarchy for the ABC engine."""


class AbcError(ValueError):
    """Base class for all engine errors."""


class InvalidBandwidthError(AbcError):
    pass


class EmptyDataError(AbcError):
    pass


class DegenerateWeightsError(AbcError):
    pass


class DomainError(AbcError):
    pass


class InvalidDfError(AbcError):
    pass


class ShapeError(AbcError):
    pass


class SingularDesignError(AbcError):
    """Weighted design matrix is rank deficient.

    ``column`` is the 0-based index of the first summary-statistic column that
    is linearly dependent on the intercept and the preceding columns, or None
    when there are simply too few positively weighted rows.
    """

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class TrainingDivergenceError(AbcError):
    pass


class SimulationError(AbcError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyPosteriorError(AbcError):
    pass


class DegenerateRegionError(AbcError):
    pass


class LowMassError(AbcError):
    pass


class ConfigError(AbcError):
    pass


class UndefinedRmaeError(AbcError):
    pass


class ZeroAcceptanceError(AbcError):
    pass
