"""Exception types raised across the package."""


class SGAPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SGAPError, ValueError):
    """A config value or tensor shape does not match what a component expects."""


class CorpusIntegrityError(SGAPError):
    """The on-disk or in-memory corpus violates the layout a protocol needs."""

    def __init__(self, message, identity_id=None):
        super().__init__(message)
        self.identity_id = identity_id


class IngestionError(SGAPError):
    """An image file could not be decoded."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class ArchiveIntegrityError(SGAPError):
    """A parameter archive is truncated, corrupt or malformed."""


class IncompatibleArchiveError(SGAPError):
    """A parameter archive was written with a different format version."""


class NonFiniteLossError(SGAPError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, last_record=None, checkpoint=None):
        super().__init__(message)
        self.last_record = last_record
        self.checkpoint = checkpoint


class DegenerateSampleError(SGAPError, ValueError):
    """Estimator preconditions fail (too few points, zero neighbour distance)."""


class StratificationError(SGAPError, ValueError):
    """A fold cannot contain every class."""


class ValidationError(SGAPError, ValueError):
    """Config document failed validation. ``fields`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        self.fields = [field for field, _ in self.problems]
        lines = "; ".join(f"{field}: {why}" for field, why in self.problems)
        super().__init__(f"invalid config ({len(self.problems)} problem(s)): {lines}")
