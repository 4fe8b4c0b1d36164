"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented categories (2 usage, 3 I/O, 4 validation, 5 numeric fault).
"""


class ReidError(Exception):
    exit_code = 4
    category = "error"


class UsageError(ReidError):
    exit_code = 2
    category = "usage"


class StorageError(ReidError):
    exit_code = 3
    category = "io"


class ValidationError(ReidError, ValueError):
    exit_code = 4
    category = "validation"


class NumericFault(ReidError, ArithmeticError):
    exit_code = 5
    category = "numeric"


class ShapeError(ValidationError):
    pass


class DegenerateVectorError(NumericFault):
    pass


class ManifestError(ValidationError):
    """Malformed manifest row; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(StorageError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncationError(FormatError):
    pass
