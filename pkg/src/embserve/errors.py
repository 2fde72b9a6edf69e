"""Exception hierarchy shared by all embserve modules."""


class EmbServeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EmbServeError):
    """Invalid deployment or experiment configuration (bad placement, missing
    table, inconsistent section). The message names the offending field."""


class LookupValidationError(EmbServeError):
    """A caller-supplied index is outside the table's row range. This is a
    user-input error, rejected at ranker ingress rather than clamped."""


class RoutingViolationError(EmbServeError):
    """An embedding server was asked for a row it does not host. Signals a
    ranker or routing bug, never a user error."""


class CapacityError(EmbServeError):
    """NN memory demand alone exceeds GPU capacity; the batch is inadmissible."""


class TraceParseError(EmbServeError):
    """Malformed trace file. Carries the 1-based line number and field name."""

    def __init__(self, line_no: int, field: str, detail: str):
        self.line_no = line_no
        self.field = field
        super().__init__(f"trace parse error at line {line_no}, field '{field}': {detail}")


class FlowControlError(EmbServeError):
    """Credit accounting violated (outstanding > granted, queue overflow)."""


class InvariantError(EmbServeError):
    """A runtime model invariant was violated; aborts the run with context."""
