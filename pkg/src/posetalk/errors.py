"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: validation problems exit 2,
missing stage prerequisites exit 3.
"""


class PoseTalkError(Exception):
    pass


class ValidationError(PoseTalkError, ValueError):
    """Bad config values, malformed inputs, shape mismatches."""


class MissingPrerequisiteError(PoseTalkError, RuntimeError):
    """A required artifact (checkpoint, corpus, file) does not exist."""

    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"missing prerequisite: {name}")


class FitDivergenceError(PoseTalkError, RuntimeError):
    """Parameter fitting produced non-finite loss."""
