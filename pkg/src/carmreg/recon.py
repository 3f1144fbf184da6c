"""Rotational acquisition runs and FDK cone-beam reconstruction.

A run is one DRR per evenly spaced C-arm rotation at a fixed angulation.
Reconstruction follows the classic filtered-backprojection recipe on
detector coordinates rescaled to the iso-center plane: cosine weighting,
short-scan redundancy weights, row-wise ramp filtering, then voxel-driven
backprojection with the inverse-square depth weight.  The renderer's pixel
values integrate mu (1/cm) over path (mm) divided by ten, so the raw
backprojection recovers attenuation per mm; a final factor of ten brings
the voxels back to 1/cm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .core import (
    CArmCamera,
    CameraFrame,
    Image2D,
    RigidTransform,
    Volume,
    camera_frame,
    default_camera,
    identity_transform,
    invert,
)
from .fileio import load_camera, load_image, save_camera, save_image
from .phantom import PhantomSpec, generate_phantom
from .projector import DrrConfig, render_drr

RAMP_WINDOWS = ("ramlak", "hann")


@dataclass(frozen=True)
class Trajectory:
    """Propeller sweep: evenly spaced rotations at one fixed angulation."""

    n_frames: int
    arc_deg: float = 200.0
    angulation_deg: float = 0.0
    start_deg: float | None = None  # None centers the arc on rotation zero

    def __post_init__(self):
        if int(self.n_frames) != self.n_frames or self.n_frames < 2:
            raise ValueError("n_frames must be an integer >= 2")
        if not 0.0 < self.arc_deg <= 360.0:
            raise ValueError("arc_deg must lie in (0, 360]")

    def rotations(self) -> np.ndarray:
        start = -0.5 * self.arc_deg if self.start_deg is None else self.start_deg
        return np.linspace(start, start + self.arc_deg, self.n_frames)


def frame_cameras(trajectory: Trajectory,
                  camera: CArmCamera | None = None) -> list[CArmCamera]:
    """One camera per frame; only the rotation varies along the run."""
    camera = camera if camera is not None else default_camera(22.0)
    return [replace(camera, carm_rotation_deg=float(r),
                    carm_angulation_deg=float(trajectory.angulation_deg))
            for r in trajectory.rotations()]


def add_poisson_noise(image: Image2D, photons: float, rng) -> Image2D:
    """Photon-starve a line-integral image at the given count per pixel.

    Noise acts in the intensity domain (I = photons * exp(-p)) and the
    counts map back through the log; pixels that detect nothing clamp to
    a single count so the log stays finite.
    """
    if photons <= 0.0:
        raise ValueError("photon count must be positive")
    intensity = photons * np.exp(-image.data.astype(np.float64))
    counts = np.maximum(rng.poisson(intensity), 1)
    noisy = np.log(photons / counts).astype(np.float32)
    return Image2D(noisy, image.pixel_pitch_mm, image.fov_diameter_cm)


def simulate_rotational_run(volume: Volume,
                            trajectory: Trajectory,
                            camera: CArmCamera | None = None,
                            cfg: DrrConfig | None = None,
                            photons: float | None = None,
                            seed=None) -> list[tuple[Image2D, CArmCamera]]:
    """Render one frame per trajectory step, optionally photon-starved.

    photons None gives noiseless line integrals; a positive count routes
    every frame through add_poisson_noise with a single shared stream.
    """
    if photons is not None and photons <= 0.0:
        raise ValueError("photon count must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for cam in frame_cameras(trajectory, camera):
        img = render_drr(volume, cam, cfg=cfg)
        if photons is not None:
            img = add_poisson_noise(img, photons, rng)
        out.append((img, cam))
    return out


def parker_weights(betas_rad, gammas_rad, arc_rad: float) -> np.ndarray:
    """Redundancy weights for a short-scan sweep, shape (betas, gammas).

    betas are frame angles measured from the arc start, gammas the fan
    angles of the detector columns (ray angle = beta + gamma, so the
    complementary ray of (beta, gamma) sits at (beta + pi + 2 gamma,
    -gamma) and the two weights sum to one).  Arcs of half a turn or more
    use the smooth complementary weighting with half-overlap
    (arc - pi) / 2; a full circle is uniformly 0.5; shorter arcs carry no
    redundancy and come back unweighted.
    """
    betas = np.asarray(betas_rad, dtype=np.float64).reshape(-1, 1)
    gammas = np.asarray(gammas_rad, dtype=np.float64).reshape(1, -1)
    shape = (betas.shape[0], gammas.shape[1])
    if arc_rad >= 2.0 * math.pi - 1e-9:
        return np.full(shape, 0.5)
    if arc_rad < math.pi:
        return np.ones(shape)
    half = 0.5 * (arc_rad - math.pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_in = betas / (2.0 * (half - gammas))
        x_out = (math.pi + 2.0 * half - betas) / (2.0 * (half + gammas))
    # rays with |gamma| >= half have no in-arc complement; the clamp pins
    # their weight at one instead of extrapolating the taper
    x_in = np.clip(np.where(np.isfinite(x_in), x_in, 1.0), 0.0, 1.0)
    x_out = np.clip(np.where(np.isfinite(x_out), x_out, 1.0), 0.0, 1.0)
    w = np.ones(shape)
    rising = betas < 2.0 * (half - gammas)
    falling = betas > math.pi - 2.0 * gammas
    w = np.where(rising, np.sin(0.5 * math.pi * x_in) ** 2, w)
    w = np.where(falling, np.sin(0.5 * math.pi * x_out) ** 2, w)
    return w


def ramp_filter(rows, pitch_mm: float, window: str = "ramlak") -> np.ndarray:
    """Ramp filtering along the last axis, zero response at zero frequency.

    Uses the band-limited spatial kernel (1/(4 pitch^2) at lag zero,
    -1/(pi n pitch)^2 at odd lags, zero at even lags) applied by FFT
    convolution; the result carries the convolution's pitch factor, i.e.
    input units per mm.  "hann" tapers the response toward Nyquist.
    """
    if window not in RAMP_WINDOWS:
        raise ValueError(f"window must be one of {RAMP_WINDOWS}")
    arr = np.asarray(rows, dtype=np.float64)
    n = arr.shape[-1]
    if n < 2:
        raise ValueError("rows need at least 2 samples")
    size = 1 << int(math.ceil(math.log2(2 * n)))
    taps = np.zeros(size)
    taps[0] = 1.0 / (4.0 * pitch_mm ** 2)
    odd = np.arange(1, n, 2)
    vals = -1.0 / (math.pi * odd * pitch_mm) ** 2
    taps[odd] = vals
    taps[size - odd] = vals
    response = np.fft.rfft(taps)
    if window == "hann":
        freqs = np.arange(response.size) / size  # cycles per sample
        response = response * 0.5 * (1.0 + np.cos(2.0 * math.pi * freqs))
    flt = np.fft.irfft(np.fft.rfft(arr, size, axis=-1) * response,
                       size, axis=-1)
    return flt[..., :n] * pitch_mm


def _grid_geometry(dims, spacing_mm, fov_diameter_cm):
    if np.isscalar(dims):
        dims3 = (int(dims),) * 3
    else:
        dims3 = tuple(int(d) for d in dims)
        if len(dims3) != 3:
            raise ValueError("dims must be a scalar or a 3-tuple")
    if any(d < 2 for d in dims3):
        raise ValueError("reconstruction grid needs at least 2 voxels per axis")
    if spacing_mm is None:
        if fov_diameter_cm is None:
            raise ValueError("spacing_mm is required when frames carry no fov")
        spacing = np.full(3, fov_diameter_cm * 10.0 / min(dims3))
    elif np.isscalar(spacing_mm):
        spacing = np.full(3, float(spacing_mm))
    else:
        spacing = np.asarray(spacing_mm, dtype=np.float64).copy()
        if spacing.shape != (3,):
            raise ValueError("spacing_mm must be a scalar or a 3-vector")
    if not np.all(spacing > 0.0):
        raise ValueError("voxel spacing must be positive")
    origin = -0.5 * (np.array(dims3, dtype=np.float64) - 1.0) * spacing
    return dims3, spacing, origin


def backproject_unfiltered(image: Image2D,
                           camera: CArmCamera | CameraFrame,
                           dims,
                           spacing_mm,
                           origin_mm=None,
                           patient: RigidTransform | None = None,
                           cfg: DrrConfig | None = None) -> Volume:
    """Transpose of render_drr: smear pixel values back along their rays.

    Pairs with the renderer sample-for-sample (same step, same pixel-block
    centers, same trilinear weights), so forward and backward inner
    products agree to rounding.  This is the plain adjoint, not the
    depth-weighted FDK backprojector.
    """
    cfg = cfg or DrrConfig()
    if cfg.interpolation != "trilinear":
        raise ValueError("the adjoint pairs with trilinear sampling only")
    frame = camera if isinstance(camera, CameraFrame) else camera_frame(camera)
    nu, nv = frame.detector_dims
    ds = cfg.downsample
    if nu % ds or nv % ds:
        raise ValueError(f"detector dims {frame.detector_dims} not divisible "
                         f"by downsample {ds}")
    nu_out, nv_out = nu // ds, nv // ds
    if image.dims != (nu_out, nv_out):
        raise ValueError(f"image dims {image.dims} do not match detector "
                         f"dims {(nu_out, nv_out)} at downsample {ds}")
    dims3, spacing, origin = _grid_geometry(dims, spacing_mm, None)
    if origin_mm is not None:
        origin = np.asarray(origin_mm, dtype=np.float64).reshape(3)
    step = cfg.step_mm if cfg.step_mm is not None else 0.5 * float(spacing.min())

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

    lo = origin - 0.5 * spacing
    hi = origin + (np.array(dims3, dtype=np.float64) - 0.5) * spacing
    if np.all(src_v >= lo) and np.all(src_v <= hi):
        raise ValueError("X-ray source lies inside the volume bounding box")

    nx, ny, nz = dims3
    acc = np.zeros((nz, ny, nx), dtype=np.float64)
    _kernels.splat_kernel(np.ascontiguousarray(image.data, dtype=np.float64),
                          origin, spacing, np.ascontiguousarray(src_v),
                          np.ascontiguousarray(p00_v),
                          np.ascontiguousarray(du_v),
                          np.ascontiguousarray(dv_v),
                          nu_out, nv_out, step, acc)
    return Volume(acc, spacing, origin)


def fdk_reconstruct(frames,
                    dims=96,
                    spacing_mm=None,
                    window: str = "ramlak",
                    fov_diameter_cm: float | None = None) -> Volume:
    """Filtered backprojection of a rotational run onto a centered grid.

    frames are (Image2D, CArmCamera) pairs sharing detector geometry and a
    fixed angulation.  The arc measure uses the trapezoid rule over the
    actual frame angles, so duplicate end views of a full circle are not
    double counted.  Output voxels are attenuation in 1/cm; spacing_mm
    None sizes the grid to the cameras' field of view.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("reconstruction needs at least 2 frames")
    images = [f[0] for f in frames]
    cams = [f[1] for f in frames]
    nu, nv = images[0].dims
    pitch = images[0].pixel_pitch_mm
    for img in images[1:]:
        if img.dims != (nu, nv):
            raise ValueError(f"inconsistent frame dims: {img.dims} vs {(nu, nv)}")
        if abs(img.pixel_pitch_mm - pitch) > 1e-9:
            raise ValueError("inconsistent pixel pitch across frames")
    base = cams[0]
    for cam in cams[1:]:
        if (cam.source_to_iso_mm != base.source_to_iso_mm
                or cam.source_to_detector_mm != base.source_to_detector_mm
                or cam.carm_angulation_deg != base.carm_angulation_deg):
            raise ValueError("frames must share source distances and angulation")

    order = sorted(range(len(frames)), key=lambda i: cams[i].carm_rotation_deg)
    images = [images[i] for i in order]
    cams = [cams[i] for i in order]
    betas = np.array([math.radians(c.carm_rotation_deg) for c in cams])
    arc = float(betas[-1] - betas[0])
    if arc <= 0.0:
        raise ValueError("frames span zero arc")

    if fov_diameter_cm is None:
        fov_diameter_cm = base.fov_diameter_cm
    dims3, spacing, origin = _grid_geometry(dims, spacing_mm, fov_diameter_cm)

    sod = base.source_to_iso_mm
    du_iso = pitch * sod / base.source_to_detector_mm
    cu = (nu - 1) / 2.0
    cv = (nv - 1) / 2.0
    u_iso = (np.arange(nu) - cu) * du_iso
    v_iso = (np.arange(nv) - cv) * du_iso
    cosw = sod / np.sqrt(sod ** 2 + u_iso[None, :] ** 2 + v_iso[:, None] ** 2)
    gammas = np.arctan(u_iso / sod)
    redundancy = parker_weights(betas - betas[0], gammas, arc)

    stack = np.empty((len(images), nv, nu), dtype=np.float64)
    for i, img in enumerate(images):
        stack[i] = img.data.astype(np.float64) * cosw * redundancy[i][None, :]
    filtered = ramp_filter(stack, du_iso, window)

    arc_weights = np.empty(len(betas))
    arc_weights[0] = 0.5 * (betas[1] - betas[0])
    arc_weights[-1] = 0.5 * (betas[-1] - betas[-2])
    if len(betas) > 2:
        arc_weights[1:-1] = 0.5 * (betas[2:] - betas[:-2])

    geom = [camera_frame(cam) for cam in cams]
    sources = np.ascontiguousarray([g.source_mm for g in geom])
    u_axes = np.ascontiguousarray([g.u_axis for g in geom])
    v_axes = np.ascontiguousarray([g.v_axis for g in geom])
    w_axes = np.ascontiguousarray([g.w_axis for g in geom])

    nx, ny, nz = dims3
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    _kernels.fdk_backproject_kernel(np.ascontiguousarray(filtered),
                                    sources, u_axes, v_axes, w_axes,
                                    float(sod), float(du_iso), cu, cv,
                                    arc_weights, origin, spacing, out)
    out *= 10.0  # per-mm attenuation back to the 1/cm voxel convention
    return Volume(out, spacing, origin, fov_diameter_cm)


@dataclass(frozen=True)
class GroundTruthDataset:
    """A rotational run bundled with its own reconstruction.

    With no motion during the run, every frame is registered to the
    reconstruction by construction; ground_truth records that pose (the
    identity), making the bundle a self-labelling evaluation set.
    """

    reconstruction: Volume
    frames: tuple
    trajectory: Trajectory
    ground_truth: RigidTransform

    def random_frame(self, seed=None):
        """Uniform draw over the run; returns (index, image, camera)."""
        rng = np.random.default_rng(seed)
        idx = int(rng.integers(0, len(self.frames)))
        img, cam = self.frames[idx]
        return idx, img, cam


def ground_truth_pairs(volume,
                       trajectory: Trajectory,
                       camera: CArmCamera | None = None,
                       cfg: DrrConfig | None = None,
                       photons: float | None = None,
                       seed=None,
                       dims=96,
                       spacing_mm=None,
                       window: str = "ramlak") -> GroundTruthDataset:
    """Simulate a run of `volume` and pair it with its reconstruction.

    Accepts a Volume or a PhantomSpec (generated on the spot).
    """
    if isinstance(volume, PhantomSpec):
        volume = generate_phantom(volume)
    frames = simulate_rotational_run(volume, trajectory, camera=camera,
                                     cfg=cfg, photons=photons, seed=seed)
    recon = fdk_reconstruct(frames, dims=dims, spacing_mm=spacing_mm,
                            window=window)
    return GroundTruthDataset(reconstruction=recon, frames=tuple(frames),
                              trajectory=trajectory,
                              ground_truth=identity_transform())


def save_run(frames, run_dir) -> Path:
    """Write frame_NNNN.img.* plus frame_NNNN.cam.json under run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for i, (img, cam) in enumerate(frames):
        save_image(img, run_dir / f"frame_{i:04d}")
        save_camera(cam, run_dir / f"frame_{i:04d}.cam.json")
    return run_dir


def load_run(run_dir) -> list[tuple[Image2D, CArmCamera]]:
    """Read a run directory back as (image, camera) pairs, frame order."""
    run_dir = Path(run_dir)
    headers = sorted(run_dir.glob("frame_*.img.json"))
    if not headers:
        raise FileNotFoundError(f"no frames found under {run_dir}")
    out = []
    for header in headers:
        stem = header.name[: -len(".img.json")]
        cam_path = run_dir / f"{stem}.cam.json"
        if not cam_path.exists():
            raise FileNotFoundError(f"camera sidecar missing: {cam_path}")
        out.append((load_image(header), load_camera(cam_path)))
    return out


__all__ = [
    "GroundTruthDataset", "RAMP_WINDOWS", "Trajectory",
    "backproject_unfiltered", "fdk_reconstruct", "frame_cameras",
    "ground_truth_pairs", "load_run", "parker_weights", "ramp_filter",
    "save_run", "simulate_rotational_run",
]
