"""Error types shared across the package.

Two failure families are kept apart so callers (and the CLI) can map them
to distinct exit codes: contract violations mean the caller handed us
arguments that break a documented precondition or invariant; parse errors
mean bytes on disk do not decode as the format they claim to be.
"""


class ContractViolation(ValueError):
    """An API precondition or invariant does not hold."""


class ParseError(ValueError):
    """A serialized artifact (weights file, sidecar) is malformed.

    Carries the byte offset at which decoding failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def require(condition: bool, message: str) -> None:
    """Raise ContractViolation with `message` unless `condition` holds."""
    if not condition:
        raise ContractViolation(message)
