"""Exception types shared across the toolkit."""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ValidationError(ToolkitError):
    """Invalid values, shapes, or schema content (CLI exit code 2)."""


class CorpusError(ValidationError):
    """Malformed corpus, embeddings, or index file; message names the location."""


class StageError(ToolkitError):
    """A pipeline stage failed; wraps the underlying cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause
