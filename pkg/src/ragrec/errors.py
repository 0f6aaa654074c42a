"""Exception types shared across the pipeline."""


class RagrecError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(RagrecError):
    """A documented precondition was violated (bad shapes, zero vectors, ...)."""


class ParseError(RagrecError):
    """Malformed input file; message names the offending line."""


class DuplicateInteractionError(ParseError):
    """The same (user, item, timestamp) triple appeared twice."""


class TransportError(RagrecError):
    """Network-level failure that survived all retries."""


class StatusError(RagrecError):
    """HTTP endpoint returned a non-2xx status."""

    def __init__(self, status_code: int, body_excerpt: str):
        self.status_code = status_code
        self.body_excerpt = body_excerpt
        super().__init__(f"HTTP {status_code}: {body_excerpt}")


class ContentError(RagrecError):
    """The endpoint answered but the payload was unusable (empty, wrong shape)."""


class StoreError(RagrecError):
    """Embedding store file is corrupt or an id is not present."""


class TrainingError(RagrecError):
    """Training diverged (non-finite loss)."""


class MetricError(RagrecError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class StageError(RagrecError):
    """A pipeline stage cannot run; message names the stage and what is missing."""
