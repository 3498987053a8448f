"""Exception hierarchy. The CLI maps these onto exit codes."""


class LsicError(Exception):
    pass


class DataError(LsicError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class FormatError(DataError):
    pass


class SplitError(DataError):
    pass


class ConfigError(LsicError, ValueError):
    pass


class TrainingAbort(LsicError, RuntimeError):
    """Divergence, non-finite values or NaN metrics during training."""
