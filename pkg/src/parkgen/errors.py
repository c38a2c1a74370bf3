"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericsError -> 4.
"""


class ParkGenError(Exception):
    """Base class for all package errors."""


class StructureError(ParkGenError, ValueError):
    """A structural contract was violated (bad shape, range, id, size...)."""


class ConfigError(ParkGenError, ValueError):
    """Invalid configuration or command-line usage."""


class DataError(ParkGenError, ValueError):
    """Missing or malformed data on disk."""


class IntegrityError(DataError):
    """A persisted artifact does not match its recorded checksum."""


class ManifestVersionError(DataError):
    """A manifest was written by an incompatible schema version."""


class NumericsError(ParkGenError, RuntimeError):
    """A numeric failure (NaN/Inf loss) aborted an optimization run."""
