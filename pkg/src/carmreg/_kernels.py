"""Numba-compiled inner loops for ray marching and backprojection.

Every kernel parallelizes only over independent output elements (pixels or
voxels) and accumulates each element sequentially in double precision, so
results are bit-identical regardless of the thread count.
"""

from __future__ import annotations

import math

import numba
import numpy as np

# workqueue is fork-safe and avoids TBB/OpenMP version pitfalls; per-element
# determinism does not depend on the layer
numba.config.THREADING_LAYER = "workqueue"

# interpolation codes shared with the wrappers
INTERP_NEAREST = 0
INTERP_TRILINEAR = 1


@numba.njit(inline="always")
def _slab_intersect(ox, oy, oz, dx, dy, dz, lox, loy, loz, hix, hiy, hiz):
    """Ray/box overlap interval; returns (t_near, t_far), empty if near > far."""
    t_near = -1.0e300
    t_far = 1.0e300
    for axis in range(3):
        if axis == 0:
            o, d, lo, hi = ox, dx, lox, hix
        elif axis == 1:
            o, d, lo, hi = oy, dy, loy, hiy
        else:
            o, d, lo, hi = oz, dz, loz, hiz
        if d == 0.0:
            if o < lo or o > hi:
                return 1.0, 0.0
        else:
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_near:
                t_near = t1
            if t2 < t_far:
                t_far = t2
    return t_near, t_far


@numba.njit(inline="always")
def _sample_trilinear(data, ux, uy, uz, nx, ny, nz):
    # clamp-to-edge keeps boundary voxels at full value along grazing rays
    if ux < 0.0:
        ux = 0.0
    elif ux > nx - 1.0:
        ux = nx - 1.0
    if uy < 0.0:
        uy = 0.0
    elif uy > ny - 1.0:
        uy = ny - 1.0
    if uz < 0.0:
        uz = 0.0
    elif uz > nz - 1.0:
        uz = nz - 1.0
    ix = int(ux)
    iy = int(uy)
    iz = int(uz)
    if ix > nx - 2:
        ix = nx - 2
    if iy > ny - 2:
        iy = ny - 2
    if iz > nz - 2:
        iz = nz - 2
    fx = ux - ix
    fy = uy - iy
    fz = uz - iz
    c00 = data[iz, iy, ix] * (1.0 - fx) + data[iz, iy, ix + 1] * fx
    c10 = data[iz, iy + 1, ix] * (1.0 - fx) + data[iz, iy + 1, ix + 1] * fx
    c01 = data[iz + 1, iy, ix] * (1.0 - fx) + data[iz + 1, iy, ix + 1] * fx
    c11 = data[iz + 1, iy + 1, ix] * (1.0 - fx) + data[iz + 1, iy + 1, ix + 1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@numba.njit(inline="always")
def _sample_nearest(data, ux, uy, uz, nx, ny, nz):
    ix = int(round(ux))
    iy = int(round(uy))
    iz = int(round(uz))
    if ix < 0:
        ix = 0
    elif ix > nx - 1:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy > ny - 1:
        iy = ny - 1
    if iz < 0:
        iz = 0
    elif iz > nz - 1:
        iz = nz - 1
    return data[iz, iy, ix]


@numba.njit(cache=True, fastmath=True, parallel=True)
def drr_kernel(data, origin, spacing, src, p00, du, dv, nu, nv,
               step_mm, interp, mask, out):
    """March source->pixel rays through the volume, midpoint rule.

    out[j, i] accumulates mu (1/cm) times path (mm) over 10, dimensionless.
    """
    nz, ny, nx = data.shape
    lox = origin[0] - 0.5 * spacing[0]
    loy = origin[1] - 0.5 * spacing[1]
    loz = origin[2] - 0.5 * spacing[2]
    hix = origin[0] + (nx - 0.5) * spacing[0]
    hiy = origin[1] + (ny - 0.5) * spacing[1]
    hiz = origin[2] + (nz - 0.5) * spacing[2]
    for j in numba.prange(nv):
        for i in range(nu):
            if mask[j, i] == 0:
                out[j, i] = 0.0
                continue
            px = p00[0] + i * du[0] + j * dv[0]
            py = p00[1] + i * du[1] + j * dv[1]
            pz = p00[2] + i * du[2] + j * dv[2]
            dx = px - src[0]
            dy = py - src[1]
            dz = pz - src[2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            t_near, t_far = _slab_intersect(src[0], src[1], src[2], dx, dy, dz,
                                            lox, loy, loz, hix, hiy, hiz)
            if t_near < 0.0:
                t_near = 0.0
            if t_far <= t_near:
                out[j, i] = 0.0
                continue
            chord = t_far - t_near
            n_steps = int(math.ceil(chord / step_mm))
            if n_steps < 1:
                n_steps = 1
            dt = chord / n_steps
            acc = 0.0
            for k in range(n_steps):
                t = t_near + (k + 0.5) * dt
                ux = (src[0] + t * dx - origin[0]) / spacing[0]
                uy = (src[1] + t * dy - origin[1]) / spacing[1]
                uz = (src[2] + t * dz - origin[2]) / spacing[2]
                if interp == INTERP_TRILINEAR:
                    acc += _sample_trilinear(data, ux, uy, uz, nx, ny, nz)
                else:
                    acc += _sample_nearest(data, ux, uy, uz, nx, ny, nz)
            out[j, i] = acc * dt * 0.1
    return out


@numba.njit(cache=True)
def splat_kernel(values, origin, spacing, src, p00, du, dv, nu, nv,
                 step_mm, acc):
    """Exact transpose of drr_kernel with trilinear sampling.

    Distributes each pixel value over the voxels its ray read from; runs
    serially because distinct rays write to shared voxels.
    """
    nz, ny, nx = acc.shape
    lox = origin[0] - 0.5 * spacing[0]
    loy = origin[1] - 0.5 * spacing[1]
    loz = origin[2] - 0.5 * spacing[2]
    hix = origin[0] + (nx - 0.5) * spacing[0]
    hiy = origin[1] + (ny - 0.5) * spacing[1]
    hiz = origin[2] + (nz - 0.5) * spacing[2]
    for j in range(nv):
        for i in range(nu):
            val = values[j, i]
            if val == 0.0:
                continue
            px = p00[0] + i * du[0] + j * dv[0]
            py = p00[1] + i * du[1] + j * dv[1]
            pz = p00[2] + i * du[2] + j * dv[2]
            dx = px - src[0]
            dy = py - src[1]
            dz = pz - src[2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            t_near, t_far = _slab_intersect(src[0], src[1], src[2], dx, dy, dz,
                                            lox, loy, loz, hix, hiy, hiz)
            if t_near < 0.0:
                t_near = 0.0
            if t_far <= t_near:
                continue
            chord = t_far - t_near
            n_steps = int(math.ceil(chord / step_mm))
            if n_steps < 1:
                n_steps = 1
            dt = chord / n_steps
            w = val * dt * 0.1
            for k in range(n_steps):
                t = t_near + (k + 0.5) * dt
                ux = (src[0] + t * dx - origin[0]) / spacing[0]
                uy = (src[1] + t * dy - origin[1]) / spacing[1]
                uz = (src[2] + t * dz - origin[2]) / spacing[2]
                if ux < 0.0:
                    ux = 0.0
                elif ux > nx - 1.0:
                    ux = nx - 1.0
                if uy < 0.0:
                    uy = 0.0
                elif uy > ny - 1.0:
                    uy = ny - 1.0
                if uz < 0.0:
                    uz = 0.0
                elif uz > nz - 1.0:
                    uz = nz - 1.0
                ix = int(ux)
                iy = int(uy)
                iz = int(uz)
                if ix > nx - 2:
                    ix = nx - 2
                if iy > ny - 2:
                    iy = ny - 2
                if iz > nz - 2:
                    iz = nz - 2
                fx = ux - ix
                fy = uy - iy
                fz = uz - iz
                acc[iz, iy, ix] += w * (1 - fx) * (1 - fy) * (1 - fz)
                acc[iz, iy, ix + 1] += w * fx * (1 - fy) * (1 - fz)
                acc[iz, iy + 1, ix] += w * (1 - fx) * fy * (1 - fz)
                acc[iz, iy + 1, ix + 1] += w * fx * fy * (1 - fz)
                acc[iz + 1, iy, ix] += w * (1 - fx) * (1 - fy) * fz
                acc[iz + 1, iy, ix + 1] += w * fx * (1 - fy) * fz
                acc[iz + 1, iy + 1, ix] += w * (1 - fx) * fy * fz
                acc[iz + 1, iy + 1, ix + 1] += w * fx * fy * fz
    return acc


@numba.njit(cache=True, fastmath=True, parallel=True)
def fdk_backproject_kernel(filtered, sources, u_axes, v_axes, w_axes,
                           sod, du_mm, cu, cv, weights_beta,
                           origin, spacing, out):
    """Voxel-driven cone-beam backprojection on virtual-detector coordinates.

    filtered: (n_frames, nv, nu) rows already ramp filtered and weighted;
    detector coordinates are rescaled to the plane through the iso-center
    (sample pitch du_mm), so the depth weight is (sod / L)^2.
    """
    n_frames = filtered.shape[0]
    nv = filtered.shape[1]
    nu = filtered.shape[2]
    nz, ny, nx = out.shape
    for iz in numba.prange(nz):
        z = origin[2] + iz * spacing[2]
        for iy in range(ny):
            y = origin[1] + iy * spacing[1]
            for ix in range(nx):
                x = origin[0] + ix * spacing[0]
                acc = 0.0
                for f in range(n_frames):
                    qx = x - sources[f, 0]
                    qy = y - sources[f, 1]
                    qz = z - sources[f, 2]
                    depth = qx * w_axes[f, 0] + qy * w_axes[f, 1] + qz * w_axes[f, 2]
                    if depth < 1.0:
                        continue
                    scale = sod / depth
                    u = (qx * u_axes[f, 0] + qy * u_axes[f, 1] + qz * u_axes[f, 2]) * scale
                    v = (qx * v_axes[f, 0] + qy * v_axes[f, 1] + qz * v_axes[f, 2]) * scale
                    ui = u / du_mm + cu
                    vi = v / du_mm + cv
                    if ui < 0.0 or ui > nu - 1.0 or vi < 0.0 or vi > nv - 1.0:
                        continue
                    i0 = int(ui)
                    j0 = int(vi)
                    if i0 > nu - 2:
                        i0 = nu - 2
                    if j0 > nv - 2:
                        j0 = nv - 2
                    fu = ui - i0
                    fv = vi - j0
                    val = (filtered[f, j0, i0] * (1 - fu) * (1 - fv)
                           + filtered[f, j0, i0 + 1] * fu * (1 - fv)
                           + filtered[f, j0 + 1, i0] * (1 - fu) * fv
                           + filtered[f, j0 + 1, i0 + 1] * fu * fv)
                    acc += val * scale * scale * weights_beta[f]
                out[iz, iy, ix] = acc
    return out


@numba.njit(cache=True, fastmath=True)
def gradient_difference_score(fx, fy, mx, my, scale, sigma_h, sigma_v):
    """Sum of damped squared gradient differences over interior pixels.

    fx/fy are raveled fixed-image gradients, mx/my the moving ones; arrays
    cover interior pixels only (borders already stripped).
    """
    total = 0.0
    for i in range(fx.size):
        gx = fx[i] - scale * mx[i]
        gy = fy[i] - scale * my[i]
        total += sigma_h / (sigma_h + gx * gx) + sigma_v / (sigma_v + gy * gy)
    return total
