"""Synthetic head phantom: ellipsoid anatomy plus a contrast vessel tree.

Shapes are composited in order with supersampled partial-volume alphas,
so tissue boundaries carry the smooth intensity ramps that gradient
measures rely on.  All attenuation values are in 1/cm.  The head faces
+z (the viewing axis at zero C-arm angles); +y is superior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Volume

__all__ = [
    "Capsule",
    "Ellipsoid",
    "PhantomSpec",
    "count_landmark_voxels",
    "crop_to_fov",
    "generate_phantom",
    "head_shapes",
    "landmarks",
    "shape_occupancy",
    "vessel_tree_shapes",
]


@dataclass(frozen=True)
class Ellipsoid:
    name: str
    center_mm: tuple
    semi_axes_mm: tuple
    value: float

    def bounds(self):
        c = np.asarray(self.center_mm, dtype=np.float64)
        s = np.asarray(self.semi_axes_mm, dtype=np.float64)
        return c - s, c + s

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        ax, ay, az = self.semi_axes_mm
        return (((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2
                + ((z - cz) / az) ** 2) <= 1.0


@dataclass(frozen=True)
class Capsule:
    """Cylinder with hemispherical caps between two endpoints."""

    name: str
    p0_mm: tuple
    p1_mm: tuple
    radius_mm: float
    value: float

    def bounds(self):
        p0 = np.asarray(self.p0_mm, dtype=np.float64)
        p1 = np.asarray(self.p1_mm, dtype=np.float64)
        return np.minimum(p0, p1) - self.radius_mm, np.maximum(p0, p1) + self.radius_mm

    def contains(self, x, y, z):
        p0 = np.asarray(self.p0_mm, dtype=np.float64)
        d = np.asarray(self.p1_mm, dtype=np.float64) - p0
        dd = float(d @ d)
        t = ((x - p0[0]) * d[0] + (y - p0[1]) * d[1] + (z - p0[2]) * d[2]) / dd
        t = np.clip(t, 0.0, 1.0)
        qx = x - (p0[0] + t * d[0])
        qy = y - (p0[1] + t * d[1])
        qz = z - (p0[2] + t * d[2])
        return qx * qx + qy * qy + qz * qz <= self.radius_mm ** 2


_DEFAULT_SINUSES = (
    Ellipsoid("sinus_frontal", (0.0, 35.0, 48.0), (12.0, 10.0, 9.0), 0.0),
    Ellipsoid("sinus_maxillary_l", (-22.0, -15.0, 45.0), (10.0, 12.0, 11.0), 0.0),
    Ellipsoid("sinus_maxillary_r", (22.0, -15.0, 45.0), (10.0, 12.0, 11.0), 0.0),
    Ellipsoid("sinus_sphenoid", (0.0, 5.0, 30.0), (9.0, 8.0, 8.0), 0.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and material recipe for one synthetic head.

    The bone shell is the ellipsoid between ``skull_outer_mm`` and
    ``skull_inner_mm``; ``head_mm`` is the soft-tissue surround.  Either
    may be None to drop that structure (an all-None spec with no sinuses
    or vessels voxelizes to a zero volume).  ``seed`` only steers the
    vessel-tree branching.
    """

    dims: tuple = (128, 128, 128)
    spacing_mm: float = 1.71875
    supersample: int = 2
    head_mm: tuple | None = (78.0, 96.0, 88.0)
    skull_outer_mm: tuple | None = (72.0, 90.0, 82.0)
    skull_inner_mm: tuple = (66.0, 84.0, 76.0)
    sinuses: tuple = _DEFAULT_SINUSES
    facial_structures: bool = True
    vessel_tree: bool = True
    contrast_filled: bool = True
    seed: int = 0
    mu_soft: float = 0.21
    mu_bone: float = 0.55
    mu_contrast: float = 1.2
    fov_diameter_cm: float | None = None
    # shapes poking out of the grid raise unless explicitly allowed
    allow_partial: bool = False

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError("dims must be three sizes of at least 8")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        for mu_name in ("mu_soft", "mu_bone", "mu_contrast"):
            if getattr(self, mu_name) < 0:
                raise ValueError(f"{mu_name} must be >= 0")
        if self.skull_outer_mm is not None:
            outer = np.asarray(self.skull_outer_mm, dtype=np.float64)
            inner = np.asarray(self.skull_inner_mm, dtype=np.float64)
            if not np.all(inner < outer):
                raise ValueError(
                    "skull inner semi-axes must be strictly inside the outer shell")
            if self.head_mm is not None and not np.all(
                    np.asarray(self.head_mm) >= outer):
                raise ValueError("head must enclose the skull shell")
        if self.vessel_tree and self.skull_outer_mm is None:
            raise ValueError("a vessel tree needs a skull interior to grow in")

    def extent_cm(self) -> float:
        nx, _, nz = self.dims
        return min(int(nx), int(nz)) * self.spacing_mm / 10.0


def vessel_tree_shapes(spec=None):
    """Recursive bifurcating tube set inside the skull interior.

    One fixed trunk plus three seeded branching generations; radii step
    2.0 -> 1.4 -> 0.98 -> 0.69 mm.  Endpoints are pulled back toward
    their parent until they sit inside a margin ellipsoid, so every tube
    stays within the brain regardless of seed.
    """
    spec = spec if spec is not None else PhantomSpec()
    mu = spec.mu_contrast if spec.contrast_filled else spec.mu_soft
    safe = np.asarray(spec.skull_inner_mm, dtype=np.float64) - 4.0
    rng = np.random.default_rng(spec.seed)
    segments = []

    def pull_inside(p0, p1):
        for _ in range(60):
            if float(np.sum((p1 / safe) ** 2)) <= 0.81:
                return p1
            p1 = p0 + 0.85 * (p1 - p0)
        return p0.copy()

    def grow(p0, direction, length, radius, generation, name):
        p1 = pull_inside(p0, p0 + length * direction)
        segments.append(Capsule(name, tuple(p0), tuple(p1), radius, mu))
        if generation >= 3:
            return
        for k, side in enumerate((1.0, -1.0)):
            d = (direction + 0.9 * side * np.array([1.0, 0.0, 0.0])
                 + 0.35 * rng.uniform(-1.0, 1.0, size=3))
            d /= np.linalg.norm(d)
            grow(p1, d, 0.72 * length, 0.7 * radius, generation + 1,
                 f"{name}{k}")

    trunk = np.array([0.0, 37.0, 4.0])
    grow(np.array([0.0, -55.0, 0.0]), trunk / np.linalg.norm(trunk),
         float(np.linalg.norm(trunk)), 2.0, 0, "vessel_")
    return tuple(segments)


def facial_shapes(spec):
    """Anterior bone ridges; the pronounced-landmark knob."""
    mu = spec.mu_bone
    # these sit beyond 75 mm from the y axis, so a 15 cm field of view
    # crops them while 22 cm keeps them
    return (
        Ellipsoid("ridge_nasal", (0.0, 10.0, 80.0), (8.0, 25.0, 12.0), mu),
        Ellipsoid("ridge_zygomatic_l", (-40.0, -20.0, 70.0), (12.0, 18.0, 14.0), mu),
        Ellipsoid("ridge_zygomatic_r", (40.0, -20.0, 70.0), (12.0, 18.0, 14.0), mu),
    )


def head_shapes(spec=None):
    """Ordered compositing list; later shapes overwrite earlier ones."""
    spec = spec if spec is not None else PhantomSpec()
    shapes = []
    if spec.head_mm is not None:
        shapes.append(Ellipsoid("head", (0.0, 0.0, 0.0), spec.head_mm,
                                spec.mu_soft))
    if spec.skull_outer_mm is not None:
        shapes.append(Ellipsoid("skull", (0.0, 0.0, 0.0),
                                spec.skull_outer_mm, spec.mu_bone))
        shapes.append(Ellipsoid("brain", (0.0, 0.0, 0.0),
                                spec.skull_inner_mm, spec.mu_soft))
    shapes.extend(spec.sinuses)
    if spec.facial_structures:
        shapes.extend(facial_shapes(spec))
    if spec.vessel_tree:
        shapes.extend(vessel_tree_shapes(spec))
    return tuple(shapes)


def landmarks():
    """Named world-frame points on distinctive phantom features.

    Only seed-independent features are listed; branch tips move with the
    vessel seed.
    """
    return {
        "skull_apex_mm": np.array([0.0, 90.0, 0.0]),
        "nasal_tip_mm": np.array([0.0, 10.0, 92.0]),
        "vessel_root_mm": np.array([0.0, -55.0, 0.0]),
        "vessel_bifurcation_mm": np.array([0.0, -18.0, 4.0]),
        "sinus_frontal_mm": np.array([0.0, 35.0, 48.0]),
    }


def shape_occupancy(shape, origin_mm, spacing_mm, dims, supersample=2):
    """Partial-volume alpha of ``shape`` on the voxel grid.

    Returns ``(slices, alpha)`` restricted to the shape's bounding box,
    or ``None`` when the box misses the grid entirely.
    """
    nx, ny, nz = dims
    sp = float(spacing_mm)
    org = np.asarray(origin_mm, dtype=np.float64)
    lo, hi = shape.bounds()
    i0 = np.maximum(np.floor((lo - org) / sp).astype(int) - 1, 0)
    i1 = np.minimum(np.ceil((hi - org) / sp).astype(int) + 1,
                    np.array([nx, ny, nz]) - 1)
    if np.any(i0 > i1):
        return None
    xs = org[0] + np.arange(i0[0], i1[0] + 1) * sp
    ys = org[1] + np.arange(i0[1], i1[1] + 1) * sp
    zs = org[2] + np.arange(i0[2], i1[2] + 1) * sp
    alpha = np.zeros((zs.size, ys.size, xs.size), dtype=np.float64)
    s = int(supersample)
    offs = ((np.arange(s) + 0.5) / s - 0.5) * sp
    for oz in offs:
        for oy in offs:
            for ox in offs:
                alpha += shape.contains(
                    (xs + ox)[None, None, :],
                    (ys + oy)[None, :, None],
                    (zs + oz)[:, None, None],
                )
    alpha /= s ** 3
    slices = (slice(i0[2], i1[2] + 1), slice(i0[1], i1[1] + 1),
              slice(i0[0], i1[0] + 1))
    return slices, alpha


def generate_phantom(spec=None):
    """Voxelize the head onto a centered grid. Deterministic per spec."""
    spec = spec if spec is not None else PhantomSpec()
    nx, ny, nz = (int(d) for d in spec.dims)
    sp = float(spec.spacing_mm)
    origin = np.array([-(nx - 1) / 2.0 * sp, -(ny - 1) / 2.0 * sp,
                       -(nz - 1) / 2.0 * sp])
    bounds_lo = origin - sp / 2.0
    bounds_hi = origin + np.array([nx, ny, nz]) * sp - sp / 2.0

    shapes = head_shapes(spec)
    if not spec.allow_partial:
        clipped = [s.name for s in shapes
                   if np.any(s.bounds()[0] < bounds_lo)
                   or np.any(s.bounds()[1] > bounds_hi)]
        if clipped:
            raise ValueError(
                "shapes extend beyond the grid: " + ", ".join(clipped)
                + " (set allow_partial=True to clip them)")

    data = np.zeros((nz, ny, nx), dtype=np.float64)
    for shape in shapes:
        hit = shape_occupancy(shape, origin, sp, (nx, ny, nz),
                              spec.supersample)
        if hit is None:
            continue
        slices, alpha = hit
        data[slices] = alpha * shape.value + (1.0 - alpha) * data[slices]
    fov = spec.fov_diameter_cm if spec.fov_diameter_cm is not None \
        else spec.extent_cm()
    return Volume(data.astype(np.float32), np.full(3, sp), origin,
                  fov_diameter_cm=fov)


def count_landmark_voxels(volume, threshold):
    """Voxels bright enough to act as landmarks (bone, contrast)."""
    return int(np.count_nonzero(volume.data > threshold))


def crop_to_fov(volume, fov_diameter_cm=None):
    """Zero voxels outside the field-of-view cylinder about the y axis.

    Models format collimation; the requested diameter cannot exceed the
    lateral grid extent.
    """
    fov = volume.fov_diameter_cm if fov_diameter_cm is None else fov_diameter_cm
    nx, ny, nz = volume.dims
    extent_cm = min(nx * volume.spacing_mm[0], nz * volume.spacing_mm[2]) / 10.0
    if fov > extent_cm + 1e-9:
        raise ValueError(
            f"fov {fov} cm exceeds the {extent_cm:g} cm lateral extent")
    radius = fov * 10.0 / 2.0
    xs = volume.origin_mm[0] + np.arange(nx) * volume.spacing_mm[0]
    zs = volume.origin_mm[2] + np.arange(nz) * volume.spacing_mm[2]
    keep = (xs[None, :] ** 2 + zs[:, None] ** 2) <= radius ** 2
    data = volume.data * keep[:, None, :].astype(np.float32)
    return Volume(data, volume.spacing_mm, volume.origin_mm,
                  fov_diameter_cm=fov)
