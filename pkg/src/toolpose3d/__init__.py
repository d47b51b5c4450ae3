"""Multi-view 3D pose reconstruction and evaluation for laparoscopic tools.

Calibrated cameras observe a grasper (two jaw tips, a wrist and an arm
keypoint) and beans; per-view 2D detections are triangulated into tip and
wrist positions, the arm axis direction, and bean positions.
"""
from .camera import (
    Camera,
    Extrinsics,
    Intrinsics,
    Rig,
    back_project_ray,
    load_rig,
    project_point,
    projection_matrix,
    rig_from_dict,
    rig_to_dict,
    save_rig,
)
from .errors import (
    AxisUnobservableError,
    BehindCameraError,
    BelowRecommendedViewsWarning,
    ConfigError,
    DegenerateGeometryError,
    InsufficientViewsError,
    InvalidExtrinsicsError,
    LabelParseError,
    PointAtInfinityError,
    ProjectionError,
    StreamFormatError,
    ToolPoseError,
    UndefinedMetricError,
)
from .kernels import BACKEND
from .reconstruction import (
    BeanReconstruction,
    SmootherState,
    TipMatch,
    estimate_arm_axis,
    match_tips_across_views,
    orient_axis_sign,
    reconstruct_beans,
    reconstruct_grasper,
    triangulate_point,
)
from .types import (
    BEAN,
    GRASPER,
    Keypoint,
    Observation2D,
    ToolDetection2D,
    ToolPose3D,
)

__version__ = "0.1.0"
