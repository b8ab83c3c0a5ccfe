"""Exception hierarchy shared across the engine."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NoProposalsError(ValidationError):
    """A score was requested on an empty proposal set."""


class UndefinedSimilarityError(ValidationError):
    """Cosine similarity against a zero vector."""


class ColdBankError(ValidationError):
    """Diversity requested before any class prototype exists."""


class PredictionFormatError(ValidationError):
    """A prediction file line could not be parsed or validated."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
