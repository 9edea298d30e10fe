"""Exception hierarchy shared across the toolkit."""


class ScaffoldError(Exception):
    """Base class for all toolkit errors."""


class ImageTooSmall(ScaffoldError, ValueError):
    pass


class MissingSequenceIndex(ScaffoldError, ValueError):
    pass


class ArityMismatch(ScaffoldError, ValueError):
    pass


class UnknownSetting(ScaffoldError, ValueError):
    pass


class TemplateError(ScaffoldError, KeyError):
    pass


class NoAnswerMarker(ScaffoldError, ValueError):
    pass


class InvalidRating(ScaffoldError, ValueError):
    pass


class ProviderError(ScaffoldError, RuntimeError):
    """The provider failed after all retries."""


class TransientProviderError(ProviderError):
    """A retryable failure (rate limit, 5xx, connection reset)."""


class AuthError(ProviderError):
    pass


class BudgetExceeded(ScaffoldError, RuntimeError):
    pass


class IncompleteGroup(ScaffoldError, ValueError):
    pass


class EmptyRun(ScaffoldError, ValueError):
    pass


class ManifestError(ScaffoldError, ValueError):
    pass


class AnswerImageUnreadable(ScaffoldError, OSError):
    pass


class UnknownCoordinate(ScaffoldError, KeyError):
    pass
