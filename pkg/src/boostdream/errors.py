"""Exception types shared across the engine."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class FieldFormatError(ValueError):
    """Voxel field file is malformed or truncated."""


class MeshLoadError(ValueError):
    """Mesh file is unreadable or degenerate."""


class GuidanceError(RuntimeError):
    """Guidance backend returned an unusable result."""


class TransportError(RuntimeError):
    """Remote guidance endpoint could not be reached."""
