"""Exception types shared across the package."""


class MimaeError(Exception):
    """Base class for all package errors."""


class ShapeError(MimaeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MimaeError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(MimaeError, FloatingPointError):
    """A forward computation produced NaN or Inf."""


class FormatError(MimaeError, ValueError):
    """A binary or text file does not match its expected format.

    ``offset`` is the byte offset (binary formats) or line/row number
    (text formats) where the problem was detected, when known.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = []
        if self.path is not None:
            where.append(self.path)
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ConfigError(MimaeError, ValueError):
    """Invalid configuration text or value."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if key is not None:
            parts.append(key)
        prefix = f"{': '.join(parts)}: " if parts else ""
        super().__init__(prefix + message)


class TrainingDiverged(MimaeError, FloatingPointError):
    """A loss became non-finite during training.

    ``snapshot`` holds the diagnostic values collected at the failing step.
    """

    def __init__(self, message, snapshot):
        self.snapshot = snapshot
        super().__init__(message)
