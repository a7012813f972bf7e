"""Exception hierarchy shared by every cidbench module."""


class CidBenchError(Exception):
    """Base class for all errors raised by cidbench."""


class DatasetLoadError(CidBenchError):
    pass


class SchemaError(CidBenchError, ValueError):
    pass


class ParseError(CidBenchError, ValueError):
    pass


class WriteError(CidBenchError, OSError):
    pass


class ConfigError(CidBenchError, ValueError):
    pass


class DegenerateInputError(CidBenchError, ValueError):
    pass


class PreconditionError(CidBenchError, ValueError):
    pass


class ShapeError(CidBenchError, ValueError):
    pass


class UnsupportedTaskError(CidBenchError, ValueError):
    pass
