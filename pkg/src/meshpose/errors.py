"""Exception types shared across the package."""


class MeshPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(MeshPoseError):
    """Invalid or inconsistent pipeline configuration (CLI exit code 2)."""


class StageError(MeshPoseError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class DegenerateViewError(MeshPoseError):
    """View direction parallel to the up axis (el = +/-90)."""


class ResourceLimitError(MeshPoseError):
    """Requested size exceeds the desk-scale caps."""


class ShapeError(MeshPoseError):
    """Array input with an unsupported shape."""


class SamplingError(MeshPoseError):
    """Feature-map sample location outside the map bounds."""


class ManifestError(MeshPoseError):
    """Image-set directory failed validation.

    ``code`` is one of: ``missing-file``, ``malformed-manifest``,
    ``bad-pose``, ``mask-coverage``, ``view-count``, ``bad-camera``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
