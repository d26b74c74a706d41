"""Exception types shared across the package."""


class DistLionError(Exception):
    """Base class for every error raised by distlion."""


class InvalidInputError(DistLionError, ValueError):
    pass


class InvalidParameterError(DistLionError, ValueError):
    pass


class CorruptStreamError(DistLionError, ValueError):
    """A packed payload cannot be decoded."""


class ContractViolationError(DistLionError, ValueError):
    pass


class ConsistencyError(DistLionError, RuntimeError):
    """Workers disagree on the parameter vector after a round."""


class DivergenceError(DistLionError, RuntimeError):
    def __init__(self, round_index, message=None):
        self.round_index = round_index
        super().__init__(message or f"non-finite loss at round {round_index}")


class ConfigError(DistLionError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DatasetFormatError(DistLionError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
