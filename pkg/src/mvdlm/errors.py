"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` used by the command-line front end.
"""


class MVDLMError(Exception):
    exit_code = 1


class ParameterError(MVDLMError, ValueError):
    """Invalid model or sampler parameter (discount factor, degrees of freedom...)."""

    exit_code = 2


class ConfigurationError(MVDLMError, ValueError):
    exit_code = 2


class DataError(MVDLMError, ValueError):
    """Non-finite or otherwise unusable numerical input."""

    exit_code = 3


class FormatError(MVDLMError, ValueError):
    """Malformed file (NIfTI, CSV, summary container)."""

    exit_code = 3


class IntegrityError(FormatError):
    exit_code = 3


class MetadataError(MVDLMError, ValueError):
    """Incompatible metadata between inputs that must agree."""

    exit_code = 4


class UnsupportedCombinationError(MVDLMError, ValueError):
    exit_code = 4


class NumericalError(MVDLMError, ArithmeticError):
    exit_code = 5


class DegenerateForecastError(NumericalError):
    pass
