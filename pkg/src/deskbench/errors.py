"""Exception hierarchy shared across the toolkit."""


class BenchError(Exception):
    """Base class for all errors raised intentionally by the toolkit."""


class ConfigError(BenchError):
    """Malformed or invalid configuration input.

    Carries an optional source name and line number so the CLI can report
    ``file:line`` locations.
    """

    def __init__(self, message, source=None, line=None):
        self.source = source
        self.line = line
        super().__init__(message)

    def located(self):
        loc = self.source or "<config>"
        if self.line is not None:
            loc = f"{loc}:{self.line}"
        return f"{loc}: {super().__str__()}"


class ValidationError(BenchError):
    """Semantically invalid study inputs (unknown dataset, bad metric, ...)."""


class StoreError(BenchError):
    """Local result store or publish-client failure."""


class TrialFailure(BenchError):
    """A single trial failed; the study must continue."""
