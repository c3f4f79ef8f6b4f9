from typing import Dict, List, Optional


class NligenError(Exception):
    """Base class for every failure raised by the library."""


class ShapeError(NligenError):
    pass


class NumericalError(NligenError):
    def __init__(self, message: str, param_name: Optional[str] = None):
        super().__init__(message)
        self.param_name = param_name


class GradientCheckError(NligenError):
    pass


class CorpusFormatError(NligenError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmbeddingFormatError(NligenError):
    def __init__(self, message: str, word: Optional[str] = None):
        super().__init__(message)
        self.word = word


class VocabMismatchError(NligenError):
    def __init__(self, expected: str, actual: str):
        super().__init__(f"Vocabulary hash mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class CheckpointError(NligenError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(NligenError):
    def __init__(self, message: str, errors: Optional[Dict] = None):
        super().__init__(message if not errors else f"{message}: {errors}")
        self.errors = errors or {}


class InsufficientDataError(NligenError):
    def __init__(self, message: str, counts: Optional[Dict[str, int]] = None):
        super().__init__(message if counts is None else f"{message} (label counts: {counts})")
        self.counts = counts or {}


class PipelineStageError(NligenError):
    def __init__(self, stage: str, cause: Exception, artifacts: Optional[List[str]] = None):
        super().__init__(f"Pipeline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.artifacts = artifacts or []
