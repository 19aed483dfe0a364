"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, data-shaped errors
(MeshParseError, VoxelFormatError, DataError) -> 2, NumericalAbort -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration (unknown keys, out-of-range values)."""


class ShapeError(ValueError):
    """Tensor or grid dimensions violate an operation's contract."""


class MeshParseError(ValueError):
    """Malformed mesh file; message names the offending line."""


class VoxelFormatError(ValueError):
    """Malformed voxel file (bad magic, version, or payload length)."""


class DataError(ValueError):
    """Dataset-level problem: missing files, duplicate paths, empty input."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite objective or gradient."""
