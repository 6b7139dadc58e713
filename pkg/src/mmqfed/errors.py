"""Exception hierarchy shared by every module."""


class StructuralError(ValueError):
    """Shape, index or layout violation (bad qubit index, length mismatch, ...)."""


class NumericError(ArithmeticError):
    """Non-finite value produced or supplied where a finite one is required."""

    def __init__(self, message, **context):
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context


class ConfigError(ValueError):
    """Invalid experiment configuration.

    ``errors`` maps dotted field paths to messages so the CLI can report
    every offending field at once.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = {"<config>": errors}
        self.errors = dict(errors)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.errors.items()))


class FormatError(ValueError):
    """Malformed binary container; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset
