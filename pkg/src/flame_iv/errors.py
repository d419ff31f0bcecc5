"""Exception hierarchy shared by the library and the command line front end."""


class FlameIVError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigurationError(FlameIVError):
    """Invalid arguments, missing column roles, inconsistent schemas."""

    exit_code = 2


class ValidationError(FlameIVError):
    """Input data violates a contract (bad codes, non-binary instrument, NaN)."""

    exit_code = 3

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmptyInputError(ValidationError):
    """The input file holds no data rows."""


class WeakInstrumentError(FlameIVError):
    """The instrument has no effect on treatment, so the ratio is undefined."""

    exit_code = 4


class RankDeficiencyError(FlameIVError):
    """A regression design matrix is singular."""

    exit_code = 5
