"""Exception hierarchy shared by all engine modules.

Three families map onto the CLI exit codes: ConfigError (2), DataError (3),
InvariantError (4).
"""


class McaeError(Exception):
    """Base class for all engine errors."""


class ConfigError(McaeError):
    """Invalid configuration value, unknown key, or malformed config file."""


class DataError(McaeError):
    """Malformed or inconsistent input data."""


class InvariantError(McaeError):
    """An internal invariant was violated; indicates a bug, not bad input."""


class EmptyMaskError(DataError):
    """Mask encoding was attempted on a bitmap with no foreground pixels."""


class MaskBoundsError(DataError):
    """A mask extends outside the raster or tile it is evaluated against."""


class TileRangeError(DataError):
    """A record references a tile outside its grid."""


class RleFormatError(DataError):
    """Run-length data is not in canonical form."""


class FeatureFormatError(DataError):
    """A feature file is structurally invalid."""


class FeatureDimError(FeatureFormatError):
    """Feature vector length disagrees with the table dimension."""


class DuplicateFeatureIdError(FeatureFormatError):
    """The same mask id appears twice in one feature table."""


class NonFiniteFeatureError(FeatureFormatError):
    """A feature vector contains NaN or infinity."""


class NotNormalizedError(FeatureFormatError):
    """A feature vector norm is too far from 1 to renormalize silently."""


class MissingFeatureError(DataError):
    """A mask has no entry in the feature table."""

    def __init__(self, mask_id: int):
        super().__init__(f"mask {mask_id} has no feature vector")
        self.mask_id = mask_id


class UnknownClusterError(DataError):
    """A decision references a cluster id that does not exist."""


class NonMemberExclusionError(DataError):
    """A decision excludes a mask that is not a member of the cluster."""


class InvalidClassError(DataError):
    """A class id is not part of the active schema."""
