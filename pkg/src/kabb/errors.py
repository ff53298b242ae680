"""Exception types shared across the package."""


class KabbError(Exception):
    """Base class for all package-specific errors."""


class GraphParseError(KabbError):
    """A graph/lexicon/config document does not match its schema."""


class GraphValidationError(KabbError):
    """A parsed graph document violates a structural invariant."""


class RoutingError(KabbError):
    """A task cannot be routed (no matched concepts or empty expert pool)."""


class BudgetError(KabbError):
    """An exhaustive-search budget was exceeded; reduce the candidate pool."""


class FeedbackError(KabbError):
    """Feedback refers to an unknown task id."""


class DuplicateFeedbackError(FeedbackError):
    """Feedback for a task id that was already consumed."""


class SnapshotError(KabbError):
    """A posterior snapshot document is corrupt or inconsistent."""


class ConfigError(KabbError):
    """An experiment/environment configuration is invalid."""


class AggregationError(KabbError):
    """Curve aggregation over mismatched inputs."""
