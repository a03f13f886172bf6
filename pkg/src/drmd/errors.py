"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, stale caches, bad actions)."""


class ConfigurationError(ValueError):
    """An experiment, reward or model configuration is invalid."""


class TrainingError(RuntimeError):
    """Training could not proceed (non-finite loss, degenerate data)."""


class DatasetError(ValueError):
    """Base class for ingestion failures."""


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TemporalConstraintError(ValueError):
    """Raised when a time-aware split breaks one of the C1-C3 constraints."""

    constraint = "C?"

    def __init__(self, message: str):
        super().__init__(f"{self.constraint}: {message}")


class TrainPrecedenceError(TemporalConstraintError):
    """C1: every training sample must precede every test sample."""

    constraint = "C1"


class WindowSpanError(TemporalConstraintError):
    """C2: a test bucket must cover exactly one month."""

    constraint = "C2"


class PrevalenceError(TemporalConstraintError):
    """C3: test buckets must keep a realistic malware rate."""

    constraint = "C3"
