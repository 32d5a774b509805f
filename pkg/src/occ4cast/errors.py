"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or ill-shaped data files (CLI exit code 3)."""


class NumericalError(RuntimeError):
    """Non-finite values encountered where finiteness is required (CLI exit code 4)."""


class GridSpecMismatch(ValueError):
    """Two occupancy grids do not share dims / voxel size / origin / class count."""
