"""Exception hierarchy shared by every module."""


class MudptError(Exception):
    """Base class for all library errors."""


class ShapeError(MudptError, ValueError):
    pass


class InvalidInputError(MudptError, ValueError):
    pass


class ConfigError(MudptError, ValueError):
    pass


class VocabularyError(MudptError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class DataError(MudptError, ValueError):
    pass


class NumericError(MudptError, ArithmeticError):
    pass


class CheckpointError(MudptError, ValueError):
    pass
