"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class GraphSSLError(Exception):
    """Base class. ``module`` names the stage that raised."""

    module = "graphssl"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"error module={self.module} kind={type(self).__name__} msg={msg}"


class ConfigError(GraphSSLError, ValueError):
    """Invalid parameters or configuration."""


class FormatError(GraphSSLError, ValueError):
    """A file does not match its binary or text format."""


class IntegrityError(GraphSSLError, ValueError):
    """Data violates a structural invariant (symmetry, sizes, ranges)."""


class TrainingError(GraphSSLError, RuntimeError):
    """Training could not continue; ``state`` holds the last good model."""

    def __init__(self, message: str, state=None, module: str | None = "engine"):
        super().__init__(message, module)
        self.state = state
