"""Exception types shared across the package."""


class AutocompError(Exception):
    """Base class for all package errors."""


class VocabularyError(AutocompError):
    """Base for vocabulary document problems."""


class DuplicateEntry(VocabularyError):
    pass


class EmptyVocabulary(VocabularyError):
    pass


class MalformedRelationInverse(VocabularyError):
    pass


class InsufficientVocabulary(AutocompError):
    """The vocabulary cannot supply enough distinct elements for a concept."""


class DuplicateExhaustion(AutocompError):
    """The distinct concept space is smaller than the requested sample count."""


class ArityTooSmall(AutocompError):
    """The operation needs at least two objects."""


class NotApplicable(AutocompError):
    """The arrangement cannot be classified under the requested taxonomy."""


class SpanMismatch(AutocompError):
    """Recorded caption spans are inconsistent with the arrangement's arity."""


class BackendUnavailable(AutocompError):
    """Transport-level failure talking to a model backend."""


class ProtocolViolation(AutocompError):
    """A backend response does not conform to the wire protocol."""


class MockMiss(AutocompError):
    """A scripted mock received a request it has no fixture for."""


class MalformedScript(AutocompError):
    """A mock script document does not parse or is structurally invalid."""


class InvariantViolation(AutocompError):
    """A record violates a manifest lifecycle invariant."""


class IoFailure(AutocompError):
    """Reading or writing a manifest failed."""


class EmptyCell(AutocompError):
    """A requested benchmark cell has no trials."""


class ConfigError(AutocompError):
    """A run configuration is missing, malformed, or out of range."""
