"""Shared exception types.

The CLI maps these onto distinct exit codes: configuration problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class ConfigError(Exception):
    """Invalid configuration: bad value, unknown key, inconsistent settings."""


class DataError(Exception):
    """Missing, malformed, or misaligned input data."""


class FormatError(DataError):
    """A file does not conform to its declared format."""


class JoinError(DataError):
    """Prediction/target alignment failure; message names the offending ids."""


class NumericalError(Exception):
    """A computation produced non-finite or otherwise unusable values."""


class InvalidParameterError(ValueError):
    """Distribution parameters outside their valid region."""


class DomainError(ValueError):
    """Function argument outside its mathematical domain."""


class DimensionError(ValueError):
    """Array shape or dimension mismatch."""


class RecordExcluded(Exception):
    """Signal that an auction record fails the sample inclusion criteria."""
