"""Exception types shared across the package."""

from __future__ import annotations


class ParseError(Exception):
    """Scenario or transcript text that is not even structurally readable."""


class ValidationError(Exception):
    """Well-formed input violating the schema; carries the offending field path."""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if message else path)


class UnknownEntity(Exception):
    """Reference to an object or container id that does not exist."""


class EmptyTarget(Exception):
    """An operation that needs target points received an empty set."""


class NoFeasibleCandidate(Exception):
    """All sampled camera candidates were culled."""


class GenerationFailed(Exception):
    """Scenario generator could not satisfy its guarantees."""


class InvariantViolation(Exception):
    """A world or memory invariant failed a post-condition check."""


class ReasonerError(Exception):
    """Base class for reasoner/protocol failures."""


class ProtocolError(ReasonerError):
    """Malformed wire traffic or adapter timeout."""


class SchemaError(ReasonerError):
    """Response parsed but does not match the variant's schema."""


class OutOfRange(ReasonerError):
    """Reasoner returned an index outside the candidate range."""
