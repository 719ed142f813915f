"""Exception types shared across the package."""


class ContrastForgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(ContrastForgeError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(ContrastForgeError, ValueError):
    """A line of an input file could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class FormatError(ContrastForgeError, ValueError):
    """A binary or structured file does not match its declared format."""


class EmptyAfterFilterError(ContrastForgeError):
    """k-core filtering removed every interaction."""


class GraphError(ContrastForgeError):
    """The interaction graph violates a structural requirement."""


class NumericalError(ContrastForgeError, ArithmeticError):
    """A numeric routine produced or encountered a non-finite value."""


class BackendError(ContrastForgeError, RuntimeError):
    """A generation backend call failed after retries."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        excerpt = body[:200]
        detail = message
        if status is not None:
            detail += f" (status {status})"
        if excerpt:
            detail += f": {excerpt}"
        super().__init__(detail)
        self.status = status
        self.body_excerpt = excerpt


class CacheIntegrityError(ContrastForgeError):
    """Two cache entries share a key but disagree on the output."""


class PipelineError(ContrastForgeError):
    """The generation pipeline failed on too many items."""


class MissingArtifactError(ContrastForgeError):
    """A command was run before the stage that produces its inputs."""
