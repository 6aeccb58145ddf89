"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its preconditions."""


class MissingArtifact(FileNotFoundError):
    """A required input file (checkpoint, manifest, dataset) does not exist."""
