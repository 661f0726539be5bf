"""Exception types shared across the package."""


class ProxyAnimError(Exception):
    """Base class for all package errors."""


class TargetTooSmall(ProxyAnimError):
    """Decimation target below the minimum vertex count."""


class DegenerateInput(ProxyAnimError):
    """Point cloud too small or collinear for registration."""


class DimensionMismatch(ProxyAnimError):
    """Raster or vector shapes disagree."""


class EmptyMask(ProxyAnimError):
    """An operation needs at least one set mask pixel."""


class IndexOutOfRange(ProxyAnimError):
    """Fragment or constraint references a missing vertex/triangle."""


class ContextMismatch(ProxyAnimError):
    """Backward pass called with a context from a different forward pass."""


class ShapeMismatch(ProxyAnimError):
    """Optimizer state and gradients do not line up with parameters."""


class ProviderUnavailable(ProxyAnimError):
    """Remote prior-gradient service unreachable or misbehaving."""


class JointMismatch(ProxyAnimError):
    """Animation frame does not cover the skeleton's joints."""


class WeightMismatch(ProxyAnimError):
    """Skin weights inconsistent with mesh or skeleton."""


class UnknownJointName(ProxyAnimError):
    """Retarget map names a joint the target skeleton lacks."""


class NoVisibleNodes(ProxyAnimError):
    """Background propagation needs at least one visible node."""


class MissingAsset(ProxyAnimError):
    """Scene bundle manifest references a file that is absent."""


class CorruptAsset(ProxyAnimError):
    """An asset file failed to parse or validate."""


class InconsistentDimensions(ProxyAnimError):
    """Assets in a bundle disagree on image dimensions."""


class VersionMismatch(ProxyAnimError):
    """Checkpoint written by an incompatible format version."""


class CorruptFile(ProxyAnimError):
    """Checkpoint failed magic/checksum validation."""


class MeshHashMismatch(ProxyAnimError):
    """Checkpoint bound to a different mesh than the one provided."""


class UnknownClip(ProxyAnimError):
    """Session control referenced a clip the scene does not provide."""


class InvalidVertexIndex(ProxyAnimError):
    """Handle constraint references a vertex outside the mesh."""
