"""Exception hierarchy shared by all conftree modules."""


class ConformalTreeError(ValueError):
    """Base class for validation errors raised by conftree."""


class EmptyNodeError(ConformalTreeError):
    pass


class IneligibleDirection(ConformalTreeError):
    """A dyadic split along this dimension leaves one child without samples."""


class InsufficientDataError(ConformalTreeError):
    pass


class OutOfDomainError(ConformalTreeError):
    pass


class LeafTooSmallError(ConformalTreeError):
    pass


class SchemaError(ConformalTreeError):
    """Raised for malformed CSV input or schema files.

    ``row`` is the 1-based data row number (header excluded) when the problem
    is tied to a specific row.
    """

    def __init__(self, message, row=None, columns=None):
        self.row = row
        self.columns = list(columns) if columns else []
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
