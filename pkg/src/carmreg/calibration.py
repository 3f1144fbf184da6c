"""C-arm geometric calibration against a synthetic sag model.

The gantry reports nominal (rotation, angulation) angles, but gravity bends
it by a millimeter or two in an orientation-dependent way.  Calibration
images a dodecahedron marker phantom at grid nodes, recovers the realized
projection geometry per node with a normalized DLT, and stores each node's
deviation from the ideal frame.  Queries bilinearly interpolate the
deviations; machine_register converts the corrected frame into the patient
transform that image-based registration starts from.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .core import (
    CArmCamera,
    CameraFrame,
    RigidTransform,
    camera_frame,
    default_camera,
    frame_projection_map,
    project_points,
    rotation_about_axis,
)
from .fileio import camera_from_dict, camera_to_dict

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


class DegenerateConfigurationError(ValueError):
    """Marker configuration cannot constrain a projection matrix."""


@dataclass(frozen=True)
class MarkerPhantom:
    """Fiducial marker cloud with a known rigid geometry."""

    points_mm: np.ndarray
    circumradius_mm: float

    def __post_init__(self):
        pts = np.asarray(self.points_mm, dtype=np.float64)
        object.__setattr__(self, "points_mm", pts)
        if pts.shape != (20, 3):
            raise ValueError("marker phantom needs exactly 20 points")
        radii = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        if np.abs(radii - self.circumradius_mm).max() > 1e-9:
            raise ValueError("markers must lie on the circumsphere")
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        if d[~np.eye(20, dtype=bool)].min() < 1e-9:
            raise ValueError("markers must be pairwise distinct")


def dodecahedron_vertices(circumradius_mm: float) -> MarkerPhantom:
    """Regular dodecahedron: a cube plus three mutually orthogonal golden
    rectangles, scaled from circumradius sqrt(3) to the requested size."""
    if circumradius_mm <= 0.0:
        raise ValueError("circumradius must be positive")
    phi = GOLDEN_RATIO
    verts = [(sx, sy, sz) for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)
             for sz in (-1.0, 1.0)]
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            verts.append((0.0, s1 / phi, s2 * phi))
            verts.append((s1 / phi, s2 * phi, 0.0))
            verts.append((s1 * phi, 0.0, s2 / phi))
    pts = np.asarray(verts, dtype=np.float64) * (circumradius_mm / np.sqrt(3.0))
    return MarkerPhantom(pts, float(circumradius_mm))


def _vec3(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class SagModel:
    """Orientation-dependent gantry flex, pure translation per rigid body.

    Each world axis of the detector and source displacement follows
    a*sin(rotation) + b*sin(angulation) + c*sin(rotation)*cos(angulation)
    plus a constant rest offset: smooth, periodic, gravity-plausible, and
    rich enough that a coarse grid cannot capture it exactly.  Default
    coefficients keep every displacement component under 2 mm.
    """

    detector_sin_rotation_mm: tuple = (0.9, -0.6, 0.4)
    detector_sin_angulation_mm: tuple = (0.5, 1.0, -0.3)
    detector_cross_mm: tuple = (-0.5, 0.3, 0.8)
    source_sin_rotation_mm: tuple = (0.4, -0.25, 0.6)
    source_sin_angulation_mm: tuple = (-0.55, 0.7, 0.15)
    source_cross_mm: tuple = (0.25, -0.4, 0.45)
    detector_offset_mm: tuple = (0.0, 0.0, 0.0)
    source_offset_mm: tuple = (0.0, 0.0, 0.0)

    def displacements(self, rotation_deg: float,
                      angulation_deg: float) -> tuple[np.ndarray, np.ndarray]:
        """World-frame (source, detector) displacement at the given angles."""
        sr = np.sin(np.deg2rad(rotation_deg))
        sa = np.sin(np.deg2rad(angulation_deg))
        ca = np.cos(np.deg2rad(angulation_deg))
        src = (_vec3(self.source_sin_rotation_mm) * sr
               + _vec3(self.source_sin_angulation_mm) * sa
               + _vec3(self.source_cross_mm) * sr * ca
               + _vec3(self.source_offset_mm))
        det = (_vec3(self.detector_sin_rotation_mm) * sr
               + _vec3(self.detector_sin_angulation_mm) * sa
               + _vec3(self.detector_cross_mm) * sr * ca
               + _vec3(self.detector_offset_mm))
        return src, det

    @classmethod
    def zero(cls) -> "SagModel":
        z = (0.0, 0.0, 0.0)
        return cls(z, z, z, z, z, z, z, z)


def sagged_frame(camera: CArmCamera, sag,
                 rotation_deg: float | None = None,
                 angulation_deg: float | None = None) -> CameraFrame:
    """Realized geometry at the given angles with sag displacements applied.

    Angles default to the camera's own; passing them explicitly overrides,
    which keeps grid construction to a single template camera.
    """
    rot = camera.carm_rotation_deg if rotation_deg is None else rotation_deg
    ang = camera.carm_angulation_deg if angulation_deg is None else angulation_deg
    frame = camera_frame(replace(camera, carm_rotation_deg=rot,
                                 carm_angulation_deg=ang))
    src_d, det_d = sag.displacements(rot, ang)
    return replace(frame, source_mm=frame.source_mm + src_d,
                   detector_center_mm=frame.detector_center_mm + det_d)


def project_markers(phantom: MarkerPhantom, camera, pose=None,
                    noise_px_sigma: float = 0.0, seed=None) -> np.ndarray:
    """Labeled marker pixel positions; detection is simulated as exact.

    Accepts either a CameraFrame (sagged geometry) or a plain CArmCamera.
    """
    frame = camera if isinstance(camera, CameraFrame) else camera_frame(camera)
    pts = phantom.points_mm
    if pose is not None:
        pts = pose.apply(pts)
    depth = (pts - frame.source_mm) @ frame.w_axis
    if np.any(depth <= 1.0):
        raise ValueError("marker behind the source plane")
    px = project_points(frame_projection_map(frame), pts)
    if noise_px_sigma > 0.0:
        rng = np.random.default_rng(seed)
        px = px + rng.normal(0.0, noise_px_sigma, px.shape)
    return px


def _hartley_2d(px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = px.mean(axis=0)
    s = np.sqrt(2.0) / np.mean(np.linalg.norm(px - c, axis=1))
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (px - c) * s, t


def _hartley_3d(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    s = np.sqrt(3.0) / np.mean(np.linalg.norm(pts - c, axis=1))
    t = np.eye(4) * s
    t[3, 3] = 1.0
    t[:3, 3] = -s * c
    return (pts - c) * s, t


@dataclass(frozen=True)
class DltResult:
    """Estimated projection and its decomposition.

    matrix is Frobenius-normalized; axes holds the camera basis as rows
    (u, v, w); intrinsics has unit lower-right entry.  The decomposed source
    depth is far less certain than the matrix itself: focal length and depth
    trade off almost freely for a marker cloud this compact.
    """

    matrix: np.ndarray
    source_mm: np.ndarray
    intrinsics: np.ndarray
    axes: np.ndarray
    reprojection_rms_px: float


def estimate_projection_dlt(world_points_mm, pixel_points) -> DltResult:
    """Normalized DLT from labeled 3D-2D correspondences."""
    world = np.atleast_2d(np.asarray(world_points_mm, dtype=np.float64))
    pixels = np.atleast_2d(np.asarray(pixel_points, dtype=np.float64))
    n = world.shape[0]
    if pixels.shape[0] != n:
        raise ValueError("point counts differ")
    if n < 6:
        raise ValueError("need at least 6 correspondences")
    sv = np.linalg.svd(world - world.mean(axis=0), compute_uv=False)
    if sv[-1] < 1e-6 * sv[0]:
        raise DegenerateConfigurationError(
            "markers are coplanar within tolerance")

    wn, t3 = _hartley_3d(world)
    pn, t2 = _hartley_2d(pixels)
    design = np.zeros((2 * n, 12))
    design[0::2, 0:3] = wn
    design[0::2, 3] = 1.0
    design[0::2, 8:11] = -pn[:, 0:1] * wn
    design[0::2, 11] = -pn[:, 0]
    design[1::2, 4:7] = wn
    design[1::2, 7] = 1.0
    design[1::2, 8:11] = -pn[:, 1:2] * wn
    design[1::2, 11] = -pn[:, 1]
    _, _, vt = np.linalg.svd(design)
    p = np.linalg.inv(t2) @ vt[-1].reshape(3, 4) @ t3
    p = p / np.linalg.norm(p)

    m = p[:, :3]
    source = -np.linalg.solve(m, p[:, 3])
    k, r = scipy.linalg.rq(m)
    signs = np.diag(np.sign(np.diag(k)))
    k = k @ signs
    r = signs @ r
    if np.linalg.det(r) < 0.0:
        r = -r
    k = k / k[2, 2]
    if np.mean((world - source) @ r[2]) < 0.0:
        raise DegenerateConfigurationError("markers resolve behind the source")

    resid = project_points(p, world) - pixels
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return DltResult(matrix=p, source_mm=source, intrinsics=k, axes=r,
                     reprojection_rms_px=rms)


def frame_from_dlt(dlt: DltResult, camera: CArmCamera) -> CameraFrame:
    """Explicit frame from a decomposition; pitch and dims come from the
    camera model since the DLT only fixes their product.  Skew and the
    focal aspect ratio are not representable and get averaged away."""
    pitch = camera.pixel_pitch_mm
    u, v, w = dlt.axes
    f_px = 0.5 * (dlt.intrinsics[0, 0] + dlt.intrinsics[1, 1])
    sid = f_px * pitch
    cu0, cv0 = camera.principal_point()
    center = (dlt.source_mm + sid * w
              + (cu0 - dlt.intrinsics[0, 2]) * pitch * u
              + (cv0 - dlt.intrinsics[1, 2]) * pitch * v)
    return CameraFrame(dlt.source_mm, center, u, v, pitch,
                       camera.detector_dims)


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    uu, _, vvt = np.linalg.svd(m)
    r = uu @ vvt
    if np.linalg.det(r) < 0.0:
        r = uu @ np.diag([1.0, 1.0, -1.0]) @ vvt
    return r


def _rotation_vector(r: np.ndarray) -> np.ndarray:
    angle = np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0],
                     r[1, 0] - r[0, 1]]) / (2.0 * np.sin(angle))
    return axis * angle


def _rotation_from_vector(w: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(w)
    if angle < 1e-15:
        return np.eye(3)
    return rotation_about_axis(w, np.degrees(angle))


def frame_alignment(frame: CameraFrame, camera: CArmCamera) -> RigidTransform:
    """Closed-form patient move making the ideal camera see what frame sees.

    Exact for axis and source changes; detector displacement is intrinsic
    and cannot be absorbed by a rigid world motion, which is why
    machine_register refines this by matching projections instead.
    """
    ideal = camera_frame(camera)
    a0 = np.stack([ideal.u_axis, ideal.v_axis, ideal.w_axis])
    ae = np.stack([frame.u_axis, frame.v_axis, frame.w_axis])
    r = _nearest_rotation(a0.T @ ae)
    t = ideal.source_mm - r @ frame.source_mm
    return RigidTransform(r, t)


def registration_error_mm(init: RigidTransform, true_frame: CameraFrame,
                          camera: CArmCamera) -> float:
    """Iso-center discrepancy of a calibration init, in mm at the iso plane.

    Compares the pixel where the calibrated model (ideal camera plus init
    transform) places the world origin against the pixel the true geometry
    produces, scaled back from the detector to the iso-center.
    """
    model = frame_projection_map(camera_frame(camera), init)
    truth = frame_projection_map(true_frame)
    iso = np.zeros((1, 3))
    d = project_points(model, iso) - project_points(truth, iso)
    return float(np.linalg.norm(d) * camera.pixel_pitch_mm
                 / camera.magnification)


@dataclass(frozen=True)
class CalibrationGrid:
    """Per-node deviation of the estimated frame from the ideal one.

    Deltas live in world coordinates so that bilinear interpolation
    reproduces any displacement field linear in the angles exactly, and a
    sag-free machine yields an exactly-zero table.  axis_delta holds world
    rotation vectors (radians) carrying ideal axes onto estimated axes.
    """

    rotations_deg: np.ndarray
    angulations_deg: np.ndarray
    source_delta_mm: np.ndarray
    detector_delta_mm: np.ndarray
    axis_delta: np.ndarray
    camera: CArmCamera

    def __post_init__(self):
        for name in ("rotations_deg", "angulations_deg", "source_delta_mm",
                     "detector_delta_mm", "axis_delta"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name),
                                          dtype=np.float64))
        nr, na = self.rotations_deg.size, self.angulations_deg.size
        if nr < 2 or na < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if np.any(np.diff(self.rotations_deg) <= 0.0) \
                or np.any(np.diff(self.angulations_deg) <= 0.0):
            raise ValueError("grid axes must be strictly increasing")
        for name in ("source_delta_mm", "detector_delta_mm", "axis_delta"):
            if getattr(self, name).shape != (nr, na, 3):
                raise ValueError(f"{name} must have shape (nr, na, 3)")


def _grid_axis(lo: float, hi: float, spacing_deg: float,
               label: str) -> np.ndarray:
    if hi <= lo:
        raise ValueError(f"{label} range must be increasing")
    steps = (hi - lo) / spacing_deg
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"{label} range is not a multiple of the spacing")
    return lo + spacing_deg * np.arange(int(round(steps)) + 1)


def build_calibration_grid(sag, camera: CArmCamera | None = None,
                           rotation_range: tuple = (-100.0, 100.0),
                           angulation_range: tuple = (-40.0, 40.0),
                           spacing_deg: float = 20.0,
                           marker_circumradius_mm: float = 80.0,
                           noise_px_sigma: float = 0.0,
                           seed=None) -> CalibrationGrid:
    """Simulate a marker acquisition and run the DLT at every node."""
    if spacing_deg <= 0.0:
        raise ValueError("spacing must be positive")
    if camera is None:
        camera = default_camera(22.0)
    template = replace(camera, carm_rotation_deg=0.0, carm_angulation_deg=0.0)
    rotations = _grid_axis(*rotation_range, spacing_deg, "rotation")
    angulations = _grid_axis(*angulation_range, spacing_deg, "angulation")
    phantom = dodecahedron_vertices(marker_circumradius_mm)
    nr, na = rotations.size, angulations.size
    src_delta = np.zeros((nr, na, 3))
    det_delta = np.zeros((nr, na, 3))
    axis_delta = np.zeros((nr, na, 3))
    node_seeds = iter(np.random.SeedSequence(seed).spawn(nr * na))
    for i, rot in enumerate(rotations):
        for j, ang in enumerate(angulations):
            true_frame = sagged_frame(template, sag, rot, ang)
            px = project_markers(phantom, true_frame,
                                 noise_px_sigma=noise_px_sigma,
                                 seed=next(node_seeds))
            dlt = estimate_projection_dlt(phantom.points_mm, px)
            est = frame_from_dlt(dlt, template)
            ideal = camera_frame(replace(template, carm_rotation_deg=rot,
                                         carm_angulation_deg=ang))
            src_delta[i, j] = est.source_mm - ideal.source_mm
            det_delta[i, j] = est.detector_center_mm \
                - ideal.detector_center_mm
            a0 = np.stack([ideal.u_axis, ideal.v_axis, ideal.w_axis])
            ae = np.stack([est.u_axis, est.v_axis, est.w_axis])
            axis_delta[i, j] = _rotation_vector(_nearest_rotation(ae.T @ a0))
    return CalibrationGrid(rotations, angulations, src_delta, det_delta,
                           axis_delta, template)


def _locate(axis: np.ndarray, value: float, label: str) -> tuple[int, float]:
    if value < axis[0] - 1e-9 or value > axis[-1] + 1e-9:
        raise ValueError(f"{label} {value} outside the calibrated range "
                         f"[{axis[0]}, {axis[-1]}]")
    i = int(np.clip(np.searchsorted(axis, value, side="right") - 1,
                    0, axis.size - 2))
    frac = (value - axis[i]) / (axis[i + 1] - axis[i])
    return i, float(np.clip(frac, 0.0, 1.0))


def interpolate_camera(grid: CalibrationGrid, rotation_deg: float,
                       angulation_deg: float) -> CameraFrame:
    """Corrected acquisition frame at the requested angles.

    Returns the explicit frame rather than a nominal CArmCamera: a displaced
    source has no representation in the nominal parameterization.
    """
    i, fr = _locate(grid.rotations_deg, rotation_deg, "rotation")
    j, fa = _locate(grid.angulations_deg, angulation_deg, "angulation")
    w = np.array([(1.0 - fr) * (1.0 - fa), (1.0 - fr) * fa,
                  fr * (1.0 - fa), fr * fa])

    def bilerp(table):
        cell = np.stack([table[i, j], table[i, j + 1],
                         table[i + 1, j], table[i + 1, j + 1]])
        return w @ cell

    ideal = camera_frame(replace(grid.camera,
                                 carm_rotation_deg=rotation_deg,
                                 carm_angulation_deg=angulation_deg))
    s = _rotation_from_vector(bilerp(grid.axis_delta))
    return CameraFrame(
        source_mm=ideal.source_mm + bilerp(grid.source_delta_mm),
        detector_center_mm=ideal.detector_center_mm
        + bilerp(grid.detector_delta_mm),
        u_axis=s @ ideal.u_axis,
        v_axis=s @ ideal.v_axis,
        pixel_pitch_mm=ideal.pixel_pitch_mm,
        detector_dims=ideal.detector_dims,
    )


_FIT_CLOUD = np.array([[0.0, 0.0, 0.0],
                       [40.0, 0.0, 0.0], [-40.0, 0.0, 0.0],
                       [0.0, 40.0, 0.0], [0.0, -40.0, 0.0],
                       [0.0, 0.0, 40.0], [0.0, 0.0, -40.0]])


def projection_alignment(frame: CameraFrame,
                         camera: CArmCamera) -> RigidTransform:
    """Best rigid patient move matching the frame's projections.

    Gauss-Newton over a small cloud around the iso-center, with the rotation
    updated by left increments so the Jacobian is exact.  Unlike
    frame_alignment this also absorbs detector displacement, up to the
    sub-micron floor left by perspective terms a rigid move cannot mimic.
    """
    target = project_points(frame_projection_map(frame), _FIT_CLOUD)
    p_map = frame_projection_map(camera_frame(camera))
    m, p4 = p_map[:, :3], p_map[:, 3]
    start = frame_alignment(frame, camera)
    rot, t = start.rotation, start.translation_mm.copy()
    n = _FIT_CLOUD.shape[0]
    for _ in range(20):
        moved = _FIT_CLOUD @ rot.T + t
        h = moved @ m.T + p4
        pred = h[:, :2] / h[:, 2:3]
        resid = (pred - target).ravel()
        jac = np.zeros((2 * n, 6))
        for i in range(n):
            dpix = (m[:2] - np.outer(pred[i], m[2])) / h[i, 2]
            rc = rot @ _FIT_CLOUD[i]
            skew = np.array([[0.0, -rc[2], rc[1]],
                             [rc[2], 0.0, -rc[0]],
                             [-rc[1], rc[0], 0.0]])
            jac[2 * i:2 * i + 2, :3] = -dpix @ skew
            jac[2 * i:2 * i + 2, 3:] = dpix
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        rot = _rotation_from_vector(step[:3]) @ rot
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-13:
            break
    return RigidTransform(_nearest_rotation(rot), t)


def machine_register(grid: CalibrationGrid, rotation_deg: float,
                     angulation_deg: float) -> RigidTransform:
    """Initialization transform from calibration alone.

    Fits the rigid patient move whose ideal-camera projections best match
    the corrected frame's over a small cloud around the iso-center.  Fitting
    in projection space sidesteps the focal-length / depth ambiguity of the
    decomposed DLT parameters, which is orders of magnitude worse
    conditioned than anything visible in the image.
    """
    est = interpolate_camera(grid, rotation_deg, angulation_deg)
    ideal_cam = replace(grid.camera, carm_rotation_deg=rotation_deg,
                        carm_angulation_deg=angulation_deg)
    return projection_alignment(est, ideal_cam)


def grid_to_dict(grid: CalibrationGrid) -> dict:
    return {
        "rotations_deg": grid.rotations_deg.tolist(),
        "angulations_deg": grid.angulations_deg.tolist(),
        "source_delta_mm": grid.source_delta_mm.tolist(),
        "detector_delta_mm": grid.detector_delta_mm.tolist(),
        "axis_delta": grid.axis_delta.tolist(),
        "camera": camera_to_dict(grid.camera),
    }


def grid_from_dict(payload: dict) -> CalibrationGrid:
    return CalibrationGrid(
        rotations_deg=payload["rotations_deg"],
        angulations_deg=payload["angulations_deg"],
        source_delta_mm=payload["source_delta_mm"],
        detector_delta_mm=payload["detector_delta_mm"],
        axis_delta=payload["axis_delta"],
        camera=camera_from_dict(payload["camera"]),
    )
