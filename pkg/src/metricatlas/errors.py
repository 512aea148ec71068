"""Exception types shared across the package."""


class MetricAtlasError(Exception):
    """Base class for all package errors."""


class GridMismatchError(MetricAtlasError):
    """Two fields that must share a grid do not."""


class NotPositiveDefiniteError(MetricAtlasError):
    """An operation requiring SPD input hit a non-PD voxel."""

    def __init__(self, voxel, detail=""):
        self.voxel = tuple(int(i) for i in voxel)
        msg = f"non positive-definite matrix at voxel {self.voxel}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class StencilError(MetricAtlasError):
    """A masked voxel has no masked neighbor along some axis."""


class SolverError(MetricAtlasError):
    """An iterative solver failed to reach its tolerance."""


class FileFormatError(MetricAtlasError):
    """A malformed MTF file."""
