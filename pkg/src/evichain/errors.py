"""Exception types shared across the package."""


class EvichainError(Exception):
    """Base class for all package errors."""


class BoxError(EvichainError, ValueError):
    """Invalid box geometry: degenerate (zero-area) or non-finite coordinates."""


class SchemaError(EvichainError, ValueError):
    """A chain document violates the wire schema.

    ``path`` locates the offending field using the document's own keys,
    e.g. ``"chain[0].boxes"`` or ``"answer"``; the empty string means the
    document root.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class InvariantError(SchemaError):
    """Structurally valid document that violates a domain invariant
    (e.g. a box with x1 >= x2, hop indices out of order)."""


class DatasetError(EvichainError):
    """Base class for dataset construction errors."""


class GoldMissingError(DatasetError):
    """A record's gold document is absent from the pool."""


class InsufficientPoolError(DatasetError):
    """The eligible distractor pool cannot fill a candidate set."""


class EmptyDatasetError(DatasetError):
    """An operation that needs at least one record received none."""


class EmptyEvaluationError(EvichainError):
    """Aggregation over zero example scores."""


class MissingSnapshotError(DatasetError):
    """A referenced document has no snapshot/image available."""


class TransformError(EvichainError, ValueError):
    """Invalid affine transform (non-positive scale, crop outside frame)."""


class LabelInconsistencyError(EvichainError, ValueError):
    """A chain references a candidate label that cannot be resolved."""


class CaptureError(EvichainError):
    """Base class for page-capture failures."""


class NavigationTimeoutError(CaptureError):
    """The page did not reach a ready state within the timeout."""


class CaptureFailedError(CaptureError):
    """Screenshot was taken but failed validity checks (or could not be taken)."""


class EndpointUnreachableError(EvichainError):
    """An HTTP endpoint stayed unreachable after the configured retries."""


class ClientError(EvichainError):
    """The inference endpoint rejected a request (non-retryable)."""


class AuthFailureError(ClientError):
    """The inference endpoint rejected our credentials (401/403)."""


class ConfigError(EvichainError):
    """Invalid or inconsistent run configuration."""
