"""
Exception hierarchy for DD-Search
Every error raised on purpose by the package derives from DDSearchError
"""


class DDSearchError(Exception):
    """Base class for all DD-Search errors"""


class ContractViolationError(DDSearchError, ValueError):
    """A caller broke an operation's precondition (shapes, lengths, ranges)"""


class InvalidStateError(ContractViolationError):
    """A phase-space state or Voigt vector failed validation"""


class MetricConstructionError(DDSearchError):
    """The metric could not be built or is not symmetric positive definite"""


class EmptyDatasetError(DDSearchError):
    """A nearest-neighbor operation was asked to search zero points"""


class DatasetError(DDSearchError):
    """Base class for dataset file problems"""


class DatasetHeaderError(DatasetError):
    """Missing or malformed dataset header"""


class DatasetTruncatedError(DatasetError):
    """Dataset payload is shorter than its header promises"""


class DatasetChecksumError(DatasetError):
    """Dataset payload does not match its stored checksum"""


class DatasetFormatError(DatasetError):
    """Unsupported file extension or CSV layout"""


class IndexFormatError(DDSearchError):
    """A serialized index file is unreadable or does not fit the dataset"""


class SingularSystemError(DDSearchError):
    """The reduced stiffness matrix could not be factorized"""


class ConvergenceError(DDSearchError):
    """A linear or Newton solve missed its residual tolerance"""


class ConfigError(DDSearchError):
    """Configuration file or values are malformed"""


class BenchError(DDSearchError):
    """The benchmark harness cannot run or write its results"""
