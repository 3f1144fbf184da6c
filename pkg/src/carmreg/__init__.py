"""2D/3D rigid registration of X-ray projections to rotational reconstructions."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    CArmCamera,
    CameraFrame,
    Image2D,
    PoseError,
    RigidTransform,
    Volume,
    camera_frame,
    compose,
    default_camera,
    invert,
    pose_error,
    projection_map,
)
