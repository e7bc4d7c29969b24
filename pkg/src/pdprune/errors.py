"""Exception types shared across the package."""


class PdpError(Exception):
    pass


class ShapeError(PdpError, ValueError):
    """Operand shapes do not compose."""


class InputError(PdpError, ValueError):
    """An argument is outside its valid domain."""


class StateError(PdpError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward twice)."""


class FormatError(PdpError, ValueError):
    """A file on disk is malformed or truncated."""


class DivergenceError(PdpError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
