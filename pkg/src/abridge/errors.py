"""Exception hierarchy shared across the engine."""


class AbridgeError(Exception):
    """Base class for all engine errors."""


class CorruptionError(AbridgeError):
    """Container file failed a structural integrity check."""


class BadMagicError(CorruptionError):
    """Header or end magic bytes did not verify."""


class TruncatedFooterError(CorruptionError):
    """File too short, or footer length points outside the file."""


class MetadataParseError(CorruptionError):
    """Footer bytes are not a valid metadata document."""


class SingleWriterViolation(AbridgeError):
    """A second writer tried to open a file that already has one."""


class LockTimeoutError(AbridgeError):
    """Could not acquire an advisory lock within the deadline."""


class DatasetNotFoundError(AbridgeError):
    """Named dataset does not exist in the container."""


class DatasetExistsError(AbridgeError):
    """Dataset path is already in use."""


class MappingOverlapError(AbridgeError):
    """Two virtual-dataset mappings target overlapping destination regions."""


class CyclicReferenceError(AbridgeError):
    """Virtual dataset resolution revisited a (file, dataset) pair."""


class SourceMissingError(AbridgeError):
    """A virtual mapping's source file or dataset is absent at read time."""


class BarrierTimeoutError(AbridgeError):
    """Coordinator gave up waiting for worker contributions."""


class CatalogError(AbridgeError):
    """Catalog lookup or registration failure."""
