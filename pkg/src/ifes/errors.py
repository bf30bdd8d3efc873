"""Exception hierarchy. Each class maps to a CLI exit code."""


class IfesError(Exception):
    exit_code = 1


class ConfigError(IfesError):
    exit_code = 2


class DimensionError(IfesError, ValueError):
    exit_code = 2


class DataError(IfesError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class RegistrationError(DataError):
    pass


class MetricError(DataError, ValueError):
    pass


class IntegrityError(IfesError):
    exit_code = 4


class VerificationError(IfesError):
    exit_code = 5

    def __init__(self, message, component=None, index=None):
        super().__init__(message)
        self.component = component
        self.index = index


class TrainingError(IfesError):
    exit_code = 6


class UsageError(IfesError, RuntimeError):
    exit_code = 1
