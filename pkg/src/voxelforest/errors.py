"""Exception hierarchy.

Every failure that stems from bad input data or a broken file contract derives
from :class:`DataError`; the CLI maps those to exit code 2.
"""


class VoxelForestError(Exception):
    """Base class for all package errors."""


class DataError(VoxelForestError):
    """Input data or file contents violate a documented contract."""


class InvariantError(VoxelForestError):
    """An internal invariant failed; indicates a bug rather than bad input."""


class DegenerateInputError(DataError, ValueError):
    """Input is well-formed but too degenerate to process (empty mask, zero range...)."""


class DimsMismatchError(DataError, ValueError):
    pass


class VoxelIndexError(DataError, IndexError):
    pass


class VolumeFormatError(DataError):
    """Base class for SVF1 read failures."""

    def __init__(self, message, field=None, path=None):
        self.field = field
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"{message}{where}")


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


class NonFiniteValueError(VolumeFormatError):
    pass


class HeaderError(VolumeFormatError):
    pass


class ManifestError(DataError):
    pass


class ModelFormatError(DataError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class FeatureLayoutError(ModelFormatError):
    pass


class TreeStructureError(ModelFormatError):
    pass


class LabelError(DataError, ValueError):
    pass
