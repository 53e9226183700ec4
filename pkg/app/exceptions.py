"""Error hierarchy shared by services and commands.

Every error carries the process exit code the CLI reports for it.
"""


class SagcnError(Exception):
    exit_code = 1


class PreconditionError(SagcnError):
    exit_code = 2


class CorpusFormatError(PreconditionError):
    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptyCorpusError(PreconditionError):
    pass


class VocabularyError(PreconditionError):
    def __init__(self, message: str, available: int | None = None):
        self.available = available
        super().__init__(message)


class ManifestError(PreconditionError):
    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        super().__init__(message)


class ShapeError(PreconditionError, ValueError):
    pass


class BackendError(SagcnError):
    exit_code = 3


class DivergenceError(SagcnError):
    exit_code = 4
