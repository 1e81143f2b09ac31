"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit-code family (see :mod:`prsa.cli`).
"""


class PRSAError(Exception):
    """Base class for all package errors."""


class ConfigError(PRSAError, ValueError):
    """Invalid run configuration or parameter value."""


class ParameterError(ConfigError):
    """A numeric parameter lies outside its admissible range."""


class FormatError(PRSAError, ValueError):
    """Malformed or unsupported input file."""


class NumericError(PRSAError, ArithmeticError):
    """Base class for numerical degeneracies."""


class DesignError(NumericError):
    """The experimental paradigm or design matrix is unusable."""


class SingularDesignError(DesignError):
    """X'G^-1 X is (numerically) singular."""


class FilterError(DesignError):
    """The high-pass basis spans (almost) the whole time axis."""


class EstimationError(NumericError):
    """A volume-level estimator cannot be computed from the data."""


class CollinearityError(NumericError):
    """Confounder design of a partial correlation is rank deficient."""


class DegenerateSignal(NumericError):
    """A correlation is undefined (constant or fully explained input).

    At the searchlight level this becomes a missing value, never a crash.
    """


class InferenceError(NumericError):
    """Second-level statistics cannot be computed."""


class DegenerateModelError(NumericError):
    """The stimulus similarity model has constant off-diagonal terms."""
