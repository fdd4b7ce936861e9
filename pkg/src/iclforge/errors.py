"""Exception types shared across the toolkit."""


class IclForgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(IclForgeError):
    """Invalid or inconsistent run configuration."""


class MalformedRecord(IclForgeError):
    """A corpus record could not be parsed or failed validation."""

    def __init__(self, line: int, reason: str = "") -> None:
        self.line = line
        detail = f"malformed record at line {line}"
        if reason:
            detail += f": {reason}"
        super().__init__(detail)


class EmptyRepository(IclForgeError):
    """A demonstration repository contains no usable records."""


class InsufficientClass(IclForgeError):
    """A label has too few members to satisfy the requested balance."""

    def __init__(self, label: str) -> None:
        self.label = label
        super().__init__(f"not enough members of label {label!r} to balance")


class BackendUnavailable(IclForgeError):
    """The model backend cannot be reached or returned a server failure."""


class ProtocolError(IclForgeError):
    """The model backend answered with a malformed or incomplete body."""


class LabelsUnscorable(IclForgeError):
    """The backend cannot produce per-label scores for this transcript."""


class ScoringUnsupported(IclForgeError):
    """The backend does not expose token log-likelihoods."""


class NoMask(IclForgeError):
    """An infill request contained no mask sentinel."""


class MultipleMasks(IclForgeError):
    """An infill request contained more than one mask sentinel."""


class NoProposals(IclForgeError):
    """Every infill proposal was filtered out; nothing to rank."""


class EncoderMismatch(IclForgeError):
    """Embeddings from different encoders cannot be compared."""


class DimensionMismatch(IclForgeError):
    """Embeddings of different dimensions cannot be compared."""


class EmptyQuerySet(IclForgeError):
    """An operation over a query set received no queries."""


class ParseError(IclForgeError):
    """A snippet does not lex or parse under the language grammar."""

    def __init__(self, position: int, reason: str = "") -> None:
        self.position = position
        detail = f"parse failure at offset {position}"
        if reason:
            detail += f": {reason}"
        super().__init__(detail)


class SubstituteCollision(IclForgeError):
    """A substitute name already occurs in the snippet."""


class ReservedWord(IclForgeError):
    """A substitute name is a keyword of the target language."""


class ModeMismatch(IclForgeError):
    """Readouts do not match the flip criterion's task mode."""


class EligibleZero(IclForgeError):
    """A rate was requested over zero eligible cases."""


class NoFlips(IclForgeError):
    """Query-time accounting is undefined when nothing flipped."""


class ZeroBaseline(IclForgeError):
    """A relative drop is undefined against a zero baseline metric."""

    def __init__(self, metric: str) -> None:
        self.metric = metric
        super().__init__(f"baseline {metric} is zero; relative drop undefined")


class EmptyReference(IclForgeError):
    """A text metric received an empty reference side."""


class EmptyInput(IclForgeError):
    """A text metric received an empty candidate or reference."""


class BundleError(IclForgeError):
    """An ICL bundle could not be read or written."""

    def __init__(self, reason: str, position: int | None = None) -> None:
        self.position = position
        detail = reason
        if position is not None:
            detail += f" (at offset {position})"
        super().__init__(detail)
