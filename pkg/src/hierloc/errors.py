"""Exception hierarchy.

Everything a caller can fix by changing inputs derives from
:class:`ValidationError`; the CLI maps that family to exit code 2.
"""


class ValidationError(ValueError):
    pass


class SchemaError(ValidationError):
    pass


class DanglingReferenceError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class UnknownIdError(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DegenerateConfigurationError(ValidationError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class ZeroProjectionError(ValidationError):
    pass
