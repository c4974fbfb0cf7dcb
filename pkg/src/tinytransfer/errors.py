"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented codes (2 config, 3 data, 4 internal).
"""


class TinyTransferError(Exception):
    exit_code = 4


class ConfigError(TinyTransferError):
    exit_code = 2


class DataError(TinyTransferError, ValueError):
    exit_code = 3


class ShapeMismatch(DataError):
    pass


class NonFiniteError(TinyTransferError, ArithmeticError):
    pass


class FormatError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"node {node_id!r}: {message}")
        self.node_id = node_id


class InvalidTruncation(ValidationError):
    pass


class MissingLabels(DataError):
    pass


class DecodeError(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyAfterTrim(DataError):
    pass


class TooShort(DataError):
    pass


class StaleCache(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ClassMismatch(DataError):
    pass


class DegenerateDataset(DataError):
    pass


class AlreadyQuantized(DataError):
    pass


class NoClasses(DataError):
    pass


class EmptyClass(DataError):
    pass


class MixedLayout(DataError):
    pass


class PreprocessingMismatch(DataError):
    pass


class StageError(TinyTransferError):
    """Wraps an error raised inside a ``create`` stage with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3 if isinstance(cause, OSError) else 4)
