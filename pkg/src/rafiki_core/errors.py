"""Exception types shared across the package."""


class RafikiError(Exception):
    """Base class for all errors raised by rafiki_core."""


class InvalidDomain(RafikiError):
    pass


class SpaceError(RafikiError):
    """A hyper-parameter space failed validation.

    ``violations`` holds every problem found, not only the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class Exhausted(RafikiError):
    pass


class UnknownTrial(RafikiError):
    pass


class UnknownWorker(RafikiError):
    pass


class Empty(RafikiError):
    pass


class NumericalFailure(RafikiError):
    pass


class ProtocolViolation(RafikiError):
    pass


class TransportClosed(RafikiError):
    pass


class CodecError(RafikiError):
    def __init__(self, message, offset=0):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class MalformedBlob(RafikiError):
    pass


class NoProgress(RafikiError):
    pass


class EmptySelection(RafikiError):
    pass


class EmptyStats(RafikiError):
    pass


class OutOfRange(RafikiError):
    pass


class NonFinite(RafikiError):
    pass


class ConfigError(RafikiError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class ValidationError(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IncompatibleRuns(RafikiError):
    pass
