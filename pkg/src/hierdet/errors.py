"""Exception types shared across the package.

The command line maps these onto exit codes: configuration problems
exit 2, data validation failures exit 3, numerical failures exit 4.
"""


class ConfigError(ValueError):
    """A configuration combination that cannot be run."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class FormatError(ValidationError):
    """A serialized file is malformed; carries the offending byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""
