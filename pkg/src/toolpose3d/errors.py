"""Exception and warning types raised across the package."""


class ToolPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(ToolPoseError, ValueError):
    """Invalid rig, view id, or option."""


class InvalidExtrinsicsError(ConfigError):
    """Rotation is not orthonormal with unit determinant."""


class ProjectionError(ToolPoseError):
    """A point cannot be projected into a camera."""


class PointAtInfinityError(ProjectionError):
    pass


class BehindCameraError(ProjectionError):
    pass


class InsufficientViewsError(ToolPoseError):
    """Fewer usable views than the solver needs."""


class DegenerateGeometryError(ToolPoseError):
    """Rays are (near-)parallel or the solution is at infinity."""


class AxisUnobservableError(ToolPoseError):
    """Every view has coincident wrist and arm pixels."""


class UndefinedMetricError(ToolPoseError, ValueError):
    """A metric has no defined value for the given input."""


class LabelParseError(ToolPoseError, ValueError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class StreamFormatError(ToolPoseError, ValueError):
    pass


class BelowRecommendedViewsWarning(UserWarning):
    """Arm axis estimated from three or fewer views."""
