"""Digitally reconstructed radiographs by fixed-step ray sampling.

Rays run from the X-ray source through each detector pixel center.  The
volume is sampled at a fixed step along the chord clipped to the volume
bounding box (the chord is divided into equal steps no longer than the
configured step), values interpolated from the voxel grid and accumulated in
double precision.  Pixel values are in units of (1/cm) * mm / 10, i.e.
dimensionless line attenuation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import (
    CArmCamera,
    CameraFrame,
    Image2D,
    RigidTransform,
    Volume,
    camera_frame,
    invert,
)

INTERPOLATIONS = ("trilinear", "nearest")


@dataclass
class DrrConfig:
    """Rendering controls.

    step_mm None picks 0.5 * min voxel spacing.  downsample renders every
    downsample-th pixel block (detector pitch scales accordingly), the cheap
    route to multi-resolution registration.
    """

    step_mm: float | None = None
    downsample: int = 1
    interpolation: str = "trilinear"

    def __post_init__(self):
        if self.step_mm is not None and self.step_mm <= 0.0:
            raise ValueError("step_mm must be positive")
        if self.downsample < 1 or int(self.downsample) != self.downsample:
            raise ValueError("downsample must be a positive integer")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")


def ray_box_intersect(origin, direction, box_lo, box_hi):
    """Slab-method overlap of a ray with an axis-aligned box.

    Returns (t_near, t_far) in units of the direction length, or None when
    the ray misses.  t_near is clamped to 0 for origins inside the box.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    t_near, t_far = -np.inf, np.inf
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return None
            continue
        t1 = (lo[k] - o[k]) / d[k]
        t2 = (hi[k] - o[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
    t_near = max(t_near, 0.0)
    if t_far <= t_near:
        return None
    return float(t_near), float(t_far)


def _resolve_step(volume: Volume, cfg: DrrConfig) -> float:
    if cfg.step_mm is not None:
        return float(cfg.step_mm)
    return 0.5 * float(volume.spacing_mm.min())


def render_drr(volume: Volume,
               camera: CArmCamera | CameraFrame,
               patient: RigidTransform | None = None,
               cfg: DrrConfig | None = None,
               mask: np.ndarray | None = None) -> Image2D:
    """Render the projection of `volume` posed by `patient` onto the camera.

    Parameters
    ----------
    volume : attenuation grid in 1/cm.
    camera : ideal camera or realized frame.
    patient : rigid map from volume coordinates to world (identity default).
    cfg : step / downsample / interpolation controls.
    mask : optional boolean array at output dims; pixels outside are skipped
        and set to zero (collimated regions need no rays).

    The source must lie outside the volume bounding box.
    """
    cfg = cfg or DrrConfig()
    frame = camera if isinstance(camera, CameraFrame) else camera_frame(camera)
    nu, nv = frame.detector_dims
    ds = cfg.downsample
    if nu % ds or nv % ds:
        raise ValueError(f"detector dims {frame.detector_dims} not divisible by "
                         f"downsample {ds}")
    nu_out, nv_out = nu // ds, nv // ds
    step = _resolve_step(volume, cfg)

    # pixel (i, j) of the downsampled grid sits at the center of its block
    off = (ds - 1) / 2.0
    p00_w = frame.pixel_position(off, off)
    du_w = frame.u_axis * frame.pixel_pitch_mm * ds
    dv_w = frame.v_axis * frame.pixel_pitch_mm * ds

    if patient is None:
        src_v, p00_v, du_v, dv_v = frame.source_mm, p00_w, du_w, dv_w
    else:
        inv = invert(patient)
        src_v = inv.apply(frame.source_mm)
        p00_v = inv.apply(p00_w)
        du_v = inv.rotation @ du_w
        dv_v = inv.rotation @ dv_w

    lo, hi = volume.bounds_mm()
    if np.all(src_v >= lo) and np.all(src_v <= hi):
        raise ValueError("X-ray source lies inside the volume bounding box")

    if mask is None:
        mask_arr = np.ones((nv_out, nu_out), dtype=np.uint8)
    else:
        mask_arr = np.ascontiguousarray(mask, dtype=np.uint8)
        if mask_arr.shape != (nv_out, nu_out):
            raise ValueError(f"mask shape {mask_arr.shape} does not match output "
                             f"dims {(nv_out, nu_out)}")

    interp = (_kernels.INTERP_TRILINEAR if cfg.interpolation == "trilinear"
              else _kernels.INTERP_NEAREST)
    out = np.empty((nv_out, nu_out), dtype=np.float32)
    _kernels.drr_kernel(volume.data, volume.origin_mm, volume.spacing_mm,
                        np.ascontiguousarray(src_v), np.ascontiguousarray(p00_v),
                        np.ascontiguousarray(du_v), np.ascontiguousarray(dv_v),
                        nu_out, nv_out, step, interp, mask_arr, out)
    fov = camera.fov_diameter_cm if isinstance(camera, CArmCamera) else None
    return Image2D(out, frame.pixel_pitch_mm * ds, fov)


__all__ = ["DrrConfig", "INTERPOLATIONS", "ray_box_intersect", "render_drr"]
