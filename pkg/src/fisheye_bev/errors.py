"""Exception hierarchy shared by every module."""


class FisheyeBevError(Exception):
    pass


class DomainError(FisheyeBevError, ValueError):
    """Input outside the mathematical domain of an operation."""


class OutOfFovError(DomainError):
    """Point or pixel lies beyond the camera's half field of view."""


class ConvergenceError(FisheyeBevError, ArithmeticError):
    """An iterative solver hit its iteration cap."""


class FormatError(FisheyeBevError):
    """Malformed binary or text file.

    ``offset`` is the byte offset (or line number for text formats) where
    parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(FisheyeBevError):
    """Synthetic scene placement failed after the retry budget."""
