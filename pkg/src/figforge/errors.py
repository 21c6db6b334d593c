"""Exception hierarchy shared by all figforge modules."""


class FigforgeError(Exception):
    """Base class for all errors raised by figforge."""


class ConfigError(FigforgeError, ValueError):
    """A configuration or argument violates its documented invariants."""


class GenerationError(FigforgeError):
    """Rendering a compound figure failed."""


class PanelImageError(GenerationError):
    def __init__(self, source_id, reason):
        super().__init__(f"cannot use panel source {source_id!r}: {reason}")
        self.source_id = source_id


class FormatError(FigforgeError, ValueError):
    """A file does not follow its on-disk format.

    ``line`` (1-based, text formats) or ``offset`` (byte position, binary
    formats) locate the problem when known.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset
        self.reason = message


class MagicMismatchError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class SidecarMismatchError(FormatError):
    pass


class EvaluationError(FigforgeError, ValueError):
    """Inputs to a metric are inconsistent or the metric is undefined."""
