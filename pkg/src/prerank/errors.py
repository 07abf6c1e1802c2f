"""Exception types shared across the pipeline.

Each maps to a distinct CLI exit code so shell callers can tell artifact
problems from bad inputs from numeric blowups.
"""


class PrerankError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ArtifactError(PrerankError):
    """Missing, corrupt, or incompatible artifact (schema hash mismatch,
    refused overwrite, unreadable file)."""

    exit_code = 2


class ValidationError(PrerankError):
    """Structurally valid artifact with invalid content, or a bad config
    value (rate outside [0, 1], non-positive width, unknown scheme)."""

    exit_code = 3


class NumericError(PrerankError):
    """Numeric failure during training or evaluation (NaN/inf loss)."""

    exit_code = 4
