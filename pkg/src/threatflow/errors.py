"""Shared exception hierarchy.

Every error type maps to a distinct CLI exit code (see cli.EXIT_CODES), so
new exceptions must be added there as well.
"""


class ThreatflowError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ThreatflowError):
    """An input violates a declared invariant."""


class NotFoundError(ThreatflowError):
    """A referenced record or node does not exist."""


class ConflictError(ThreatflowError):
    """A write conflicts with existing state (duplicate id, duplicate pair)."""


class ParseError(ThreatflowError):
    """A document could not be parsed."""

    def __init__(self, message: str, position: tuple[int, int] | None = None):
        if position is not None:
            message = f"{message} (line {position[0]}, column {position[1]})"
        super().__init__(message)
        self.position = position


class UnsupportedConstructError(ThreatflowError):
    """A document uses elements outside the supported subset."""

    def __init__(self, elements: list[str]):
        self.elements = sorted(set(elements))
        super().__init__("unsupported elements: " + ", ".join(self.elements))


class DanglingReferenceError(ThreatflowError):
    """A document contains a cross-reference that does not resolve."""


class MissingCandidatesError(ThreatflowError):
    """A service task has no registered component candidates."""


class PlanCountExceededError(ThreatflowError):
    """Exhaustive plan enumeration would exceed the configured ceiling."""


class EmptyInputError(ThreatflowError):
    """An operation that requires a non-empty input received an empty one."""


class DerivationError(ThreatflowError):
    """Subscription derivation failed for a rule."""


class EvaluationError(ThreatflowError):
    """A rule could not be evaluated against a malformed notification."""


class DeploymentError(ThreatflowError):
    """A service could not be deployed."""


class BusError(ThreatflowError):
    """The notification bus rejected a request or is unreachable."""


class ComponentFault(ThreatflowError):
    """A component invocation failed, carrying the error id it raised.

    The runtime matches error_id against boundary event errorRef values.
    """

    def __init__(self, error_id: str, message: str = ""):
        super().__init__(message or f"component fault: {error_id}")
        self.error_id = error_id
