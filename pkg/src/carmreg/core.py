"""Geometry primitives shared by the whole package.

World frame convention: the iso-center sits at the origin.  With the C-arm at
rotation 0 and angulation 0 the viewing axis points along +z (source at
-z * SOD), and the detector u/v axes run along world +x/+y.  Rotation turns
the gantry about the world y axis, angulation about the world x axis, and
angulation is applied after rotation.  Both pivot about the iso-center.

Angles are degrees in every public signature, lengths are millimetres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ROTATION_ORTHONORMALITY_TOL = 1e-6


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    return v.copy()


def rot_x(angle_deg: float) -> np.ndarray:
    """Rotation matrix about the world x axis."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_deg: float) -> np.ndarray:
    """Rotation matrix about the world y axis."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle_deg: float) -> np.ndarray:
    """Rotation matrix about the world z axis."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation about an arbitrary (not necessarily unit) axis."""
    u = _as_vec3(axis)
    n = np.linalg.norm(u)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    u = u / n
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    ux, uy, uz = u
    cross = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(u, u)


def euler_xyz(rx_deg: float, ry_deg: float, rz_deg: float) -> np.ndarray:
    """Extrinsic x-y-z Euler rotation: Rx applied first, then Ry, then Rz."""
    return rot_z(rz_deg) @ rot_y(ry_deg) @ rot_x(rx_deg)


def rotation_angle_deg(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in degrees.

    Uses atan2 of the skew part against the trace, which stays accurate for
    angles near zero where acos of the trace loses half the digits.
    """
    r = rotation
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2
                        + (r[0, 2] - r[2, 0]) ** 2
                        + (r[1, 0] - r[0, 1]) ** 2)
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.degrees(math.atan2(s, c))


@dataclass
class RigidTransform:
    """Rigid map p -> rotation @ p + translation_mm, world units mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        self.translation_mm = _as_vec3(self.translation_mm)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ROTATION_ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3g})")
        if np.linalg.det(self.rotation) < 0.0:
            raise ValueError("rotation has negative determinant (reflection)")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation_mm


def identity_transform() -> RigidTransform:
    return RigidTransform()


def translate(tx: float, ty: float, tz: float) -> RigidTransform:
    return RigidTransform(np.eye(3), np.array([tx, ty, tz], dtype=np.float64))


def rotate_euler(rx_deg: float, ry_deg: float, rz_deg: float) -> RigidTransform:
    """Pure rotation about the iso-center, extrinsic x-y-z Euler angles."""
    return RigidTransform(euler_xyz(rx_deg, ry_deg, rz_deg), np.zeros(3))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """compose(a, b): apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation_mm + a.translation_mm)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation_mm))


def transform_to_matrix(t: RigidTransform) -> np.ndarray:
    """4x4 homogeneous form."""
    m = np.eye(4)
    m[:3, :3] = t.rotation
    m[:3, 3] = t.translation_mm
    return m


@dataclass
class CArmCamera:
    """Ideal C-arm acquisition geometry.

    pixel_pitch_mm is the detector sample spacing; the collimated field of
    view is a circle of fov_diameter_cm measured at the iso-center plane,
    which projects onto the detector magnified by SID/SOD.
    """

    source_to_iso_mm: float = 810.0
    source_to_detector_mm: float = 1195.0
    detector_dims: tuple[int, int] = (256, 256)
    pixel_pitch_mm: float = 1.0
    carm_rotation_deg: float = 0.0
    carm_angulation_deg: float = 0.0
    fov_diameter_cm: float = 22.0

    def __post_init__(self):
        if self.source_to_iso_mm <= 0.0 or self.source_to_detector_mm <= 0.0:
            raise ValueError("source distances must be positive")
        if self.source_to_detector_mm <= self.source_to_iso_mm:
            raise ValueError("source_to_detector_mm must exceed source_to_iso_mm")
        if self.pixel_pitch_mm <= 0.0 or self.fov_diameter_cm <= 0.0:
            raise ValueError("pixel pitch and fov diameter must be positive")
        nu, nv = self.detector_dims
        if nu < 3 or nv < 3:
            raise ValueError("detector needs at least 3x3 pixels")
        if self.fov_radius_px() > 0.5 * min(nu, nv) + 1e-9:
            raise ValueError("fov mask does not fit on the detector grid")

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_iso_mm

    def fov_radius_px(self) -> float:
        return self.fov_diameter_cm * 10.0 * self.magnification / (2.0 * self.pixel_pitch_mm)

    def principal_point(self) -> tuple[float, float]:
        nu, nv = self.detector_dims
        return ((nu - 1) / 2.0, (nv - 1) / 2.0)


def default_camera(fov_diameter_cm: float,
                   detector_dims: tuple[int, int] = (256, 256),
                   rotation_deg: float = 0.0,
                   angulation_deg: float = 0.0) -> CArmCamera:
    """Camera whose collimated fov circle exactly inscribes the detector."""
    mag = 1195.0 / 810.0
    pitch = fov_diameter_cm * 10.0 * mag / min(detector_dims)
    return CArmCamera(810.0, 1195.0, detector_dims, pitch,
                      rotation_deg, angulation_deg, fov_diameter_cm)


@dataclass
class CameraFrame:
    """Realized acquisition geometry: source point plus detector placement.

    Derived from CArmCamera for the ideal machine; calibration works on the
    frame directly, so mechanical sag can displace source and detector
    without touching the nominal parameterization.
    """

    source_mm: np.ndarray
    detector_center_mm: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    pixel_pitch_mm: float
    detector_dims: tuple[int, int]

    def __post_init__(self):
        self.source_mm = _as_vec3(self.source_mm)
        self.detector_center_mm = _as_vec3(self.detector_center_mm)
        self.u_axis = _as_vec3(self.u_axis)
        self.v_axis = _as_vec3(self.v_axis)

    @property
    def w_axis(self) -> np.ndarray:
        w = np.cross(self.u_axis, self.v_axis)
        return w / np.linalg.norm(w)

    def pixel_position(self, u_px, v_px) -> np.ndarray:
        cu = (self.detector_dims[0] - 1) / 2.0
        cv = (self.detector_dims[1] - 1) / 2.0
        du = np.multiply.outer(np.asarray(u_px, dtype=np.float64) - cu,
                               self.u_axis * self.pixel_pitch_mm)
        dv = np.multiply.outer(np.asarray(v_px, dtype=np.float64) - cv,
                               self.v_axis * self.pixel_pitch_mm)
        return self.detector_center_mm + du + dv


def camera_frame(camera: CArmCamera) -> CameraFrame:
    """Realize the ideal geometry: angulation applied after rotation."""
    r = rot_x(camera.carm_angulation_deg) @ rot_y(camera.carm_rotation_deg)
    sod = camera.source_to_iso_mm
    sid = camera.source_to_detector_mm
    return CameraFrame(
        source_mm=r @ np.array([0.0, 0.0, -sod]),
        detector_center_mm=r @ np.array([0.0, 0.0, sid - sod]),
        u_axis=r @ np.array([1.0, 0.0, 0.0]),
        v_axis=r @ np.array([0.0, 1.0, 0.0]),
        pixel_pitch_mm=camera.pixel_pitch_mm,
        detector_dims=camera.detector_dims,
    )


def frame_projection_map(frame: CameraFrame,
                         patient: RigidTransform | None = None) -> np.ndarray:
    """3x4 homogeneous map from world mm to detector pixel coordinates."""
    axes = np.stack([frame.u_axis, frame.v_axis, frame.w_axis])
    sid = float(np.dot(frame.w_axis, frame.detector_center_mm - frame.source_mm))
    f_px = sid / frame.pixel_pitch_mm
    # principal point: where the w axis ray from the source meets the pixel grid
    center_off = frame.detector_center_mm - frame.source_mm - sid * frame.w_axis
    cu = (frame.detector_dims[0] - 1) / 2.0 - np.dot(center_off, frame.u_axis) / frame.pixel_pitch_mm
    cv = (frame.detector_dims[1] - 1) / 2.0 - np.dot(center_off, frame.v_axis) / frame.pixel_pitch_mm
    k = np.array([[f_px, 0.0, cu], [0.0, f_px, cv], [0.0, 0.0, 1.0]])
    ext = np.hstack([axes, (-axes @ frame.source_mm)[:, None]])
    p = k @ ext
    if patient is not None:
        p = p @ transform_to_matrix(patient)
    return p


def projection_map(camera: CArmCamera,
                   patient: RigidTransform | None = None) -> np.ndarray:
    """3x4 map composing C-arm extrinsics, patient transform and intrinsics."""
    return frame_projection_map(camera_frame(camera), patient)


def project_points(p_map: np.ndarray, points) -> np.ndarray:
    """Apply a 3x4 projection map to (n, 3) world points, returning (n, 2) pixels."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = pts @ p_map[:, :3].T + p_map[:, 3]
    return h[:, :2] / h[:, 2:3]


@dataclass
class PoseError:
    """Registration residual; in/out-of-plane split is camera dependent."""

    translation_mm: float
    rotation_deg: float
    in_plane_mm: float | None = None
    out_of_plane_mm: float | None = None


def decompose_in_plane(vector_mm, camera: CArmCamera | CameraFrame) -> tuple[float, float]:
    """Split a displacement into detector-plane and viewing-axis components."""
    frame = camera if isinstance(camera, CameraFrame) else camera_frame(camera)
    v = _as_vec3(vector_mm)
    out = float(np.dot(v, frame.w_axis))
    in_plane = float(np.linalg.norm(v - out * frame.w_axis))
    return in_plane, abs(out)


def pose_error(estimated: RigidTransform,
               truth: RigidTransform,
               iso_center_mm=(0.0, 0.0, 0.0),
               camera: CArmCamera | CameraFrame | None = None) -> PoseError:
    """Residual between an estimated and a true pose.

    The error transform is compose(invert(estimated), truth); translation is
    its displacement of the iso-center and rotation its geodesic angle.
    """
    err = compose(invert(estimated), truth)
    iso = _as_vec3(iso_center_mm)
    disp = err.apply(iso) - iso
    t_mm = float(np.linalg.norm(disp))
    r_deg = rotation_angle_deg(err.rotation)
    if camera is None:
        return PoseError(t_mm, r_deg)
    in_p, out_p = decompose_in_plane(disp, camera)
    return PoseError(t_mm, r_deg, in_p, out_p)


@dataclass
class Volume:
    """Attenuation volume on a regular grid.

    data is indexed [z, y, x] (x fastest in memory); origin_mm is the world
    position of the center of voxel (0, 0, 0); values are 1/cm.
    """

    data: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    fov_diameter_cm: float | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-dimensional")
        self.spacing_mm = _as_vec3(self.spacing_mm)
        self.origin_mm = _as_vec3(self.origin_mm)
        if not np.all(self.spacing_mm > 0.0):
            raise ValueError("voxel spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def extent_mm(self) -> np.ndarray:
        return np.array(self.dims, dtype=np.float64) * self.spacing_mm

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box spanned by full voxel extents."""
        lo = self.origin_mm - 0.5 * self.spacing_mm
        return lo, lo + self.extent_mm()

    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing_mm))


def centered_volume(data: np.ndarray, spacing_mm,
                    fov_diameter_cm: float | None = None) -> Volume:
    """Volume whose grid is centered on the world origin."""
    spacing = _as_vec3(spacing_mm)
    nz, ny, nx = data.shape
    dims = np.array([nx, ny, nz], dtype=np.float64)
    origin = -0.5 * (dims - 1.0) * spacing
    return Volume(data, spacing, origin, fov_diameter_cm)


@dataclass
class Image2D:
    """Projection image; data indexed [v, u] (u fastest), dimensionless."""

    data: np.ndarray
    pixel_pitch_mm: float
    fov_diameter_cm: float | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("image data must be 2-dimensional")
        if self.pixel_pitch_mm <= 0.0:
            raise ValueError("pixel pitch must be positive")

    @property
    def dims(self) -> tuple[int, int]:
        nv, nu = self.data.shape
        return (nu, nv)


def downsample_image(image: Image2D, factor: int) -> Image2D:
    """Block-average downsampling; dims must divide evenly."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("downsample factor must be a positive integer")
    if factor == 1:
        return image
    nv, nu = image.data.shape
    if nu % factor or nv % factor:
        raise ValueError(f"image dims {image.dims} not divisible by {factor}")
    d = image.data.reshape(nv // factor, factor, nu // factor, factor)
    pooled = d.astype(np.float64).mean(axis=(1, 3)).astype(np.float32)
    return Image2D(pooled, image.pixel_pitch_mm * factor, image.fov_diameter_cm)


def fov_mask(dims: tuple[int, int], radius_px: float) -> np.ndarray:
    """Boolean collimation disc centered on the detector, True inside."""
    nu, nv = dims
    cu, cv = (nu - 1) / 2.0, (nv - 1) / 2.0
    u = np.arange(nu, dtype=np.float64) - cu
    v = np.arange(nv, dtype=np.float64) - cv
    return (u[None, :] ** 2 + v[:, None] ** 2) <= radius_px ** 2


__all__ = [
    "CArmCamera", "CameraFrame", "Image2D", "PoseError", "RigidTransform",
    "Volume", "camera_frame", "centered_volume", "compose", "decompose_in_plane",
    "default_camera", "downsample_image", "euler_xyz", "fov_mask",
    "frame_projection_map", "identity_transform", "invert", "pose_error",
    "project_points", "projection_map", "rot_x", "rot_y", "rot_z",
    "rotate_euler", "rotation_about_axis", "rotation_angle_deg",
    "transform_to_matrix", "translate",
]
