"""Vision and kinematics fusion tracker for articulated surgical tools.

The robot's kinematic reading places each tool relative to the camera through
a hand-eye calibration that drifts; the tracker estimates a 6-DOF correction
of that calibration online by matching part templates rendered from the
kinematics against the camera image, verifying their 2D layout and filtering
the result with an extended Kalman filter.
"""

from .config import TrackerConfig
from .errors import InitializationFailed, TrackingError, ValidationError
from .geometry import CameraIntrinsics, RigidTransform, compose, pose_from_vector, vector_from_pose
from .tracker import FrameResult, ToolResult, Tracker

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "FrameResult",
    "InitializationFailed",
    "RigidTransform",
    "ToolResult",
    "Tracker",
    "TrackerConfig",
    "TrackingError",
    "ValidationError",
    "compose",
    "pose_from_vector",
    "vector_from_pose",
]
