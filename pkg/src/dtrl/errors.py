"""Exception hierarchy. Each family maps to one CLI exit code (see ``dtrl.cli``)."""


class DtrlError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(DtrlError):
    pass


class MissingFileError(DatasetError):
    pass


class MissingLabelColumnError(DatasetError):
    pass


class NonNumericFeatureError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class NoFeatureColumnsError(DatasetError):
    pass


class InvalidDatasetError(DatasetError):
    """Raised when a dataset violates a structural invariant (ragged rows, one class, NaN...)."""


class MaskedActionError(DtrlError):
    """An information-gathering action was requested past the depth cap."""


class UnsupportedSplitParameterError(DtrlError):
    """Depth recovery from bounds needs ``p + 1`` prime."""


class ExtractionError(DtrlError):
    pass


class MalformedTreeError(DtrlError):
    pass


class NotRepresentableError(DtrlError):
    """A tree threshold is not on the split grid reachable in a model."""


class TreeParseError(DtrlError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ConvergenceError(DtrlError):
    pass


class ProblemTooLargeError(DtrlError):
    pass
