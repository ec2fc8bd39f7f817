"""Shared error taxonomy. The CLI maps these onto process exit codes."""


class UsageError(ValueError):
    """Bad flag combination, malformed config key, or out-of-range setting."""


class DataError(ValueError):
    """Malformed corpus file, infeasible sampling request, or bad label data."""


class CheckpointError(DataError):
    """Unreadable checkpoint or unsupported format version."""
