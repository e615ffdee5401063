"""Shared instance builders for the test suite.

Random test images are CT-like: smooth band-limited bumps on a -1000 HU
air background with the value and slope tapering to zero at the volume
hull.  Boundary samples then carry no residual, so the segment objective
is differentiable there.  Control fields used by finite-difference
oracles add a half-voxel mean offset: trilinear interpolation has
derivative kinks exactly at voxel centres, and keeping samples mid-cell
keeps a central difference on the smooth branch.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from motion4d import bspline, volgrid


def smooth_volume(rng, grid, amplitude=400.0, n_waves=5, kmax=0.3):
    nz, ny, nx = grid.shape_zyx
    X, Y, Z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    vals = np.zeros((nx, ny, nz))
    for _ in range(n_waves):
        k = rng.uniform(-kmax, kmax, 3)
        ph = rng.uniform(0, 2 * np.pi)
        vals += rng.uniform(0.3, 1.0) * np.cos(k[0] * X + k[1] * Y + k[2] * Z + ph)
    vals = vals.transpose(2, 1, 0)

    def win(n):
        w = np.ones(n)
        ramp = np.sin(np.linspace(0, np.pi / 2, 4)) ** 2
        w[:4] = ramp
        w[-4:] = ramp[::-1]
        return w

    window = win(nz)[:, None, None] * win(ny)[None, :, None] * win(nx)[None, None, :]
    return volgrid.Volume(grid, -1000.0 + amplitude * vals * window)


def midcell_control(rng, cg, jitter=0.12):
    """Smooth random control field whose samples stay mid-cell."""
    out = cg.copy()
    base = 0.5 * np.asarray(cg.image_grid.spacing)
    out.disp[:] = base + gaussian_filter(rng.normal(0.0, jitter, cg.disp.shape), 0.8)
    return out


def smooth_control(rng, cg, scale=0.4):
    """Smooth random control field around zero (no mid-cell offset)."""
    out = cg.copy()
    out.disp[:] = gaussian_filter(rng.normal(0.0, scale, cg.disp.shape), 0.8)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240612)


def _cubic_weights(u):
    """Textbook uniform cubic B-spline polynomials, written out directly."""
    return np.array(
        [
            (1 - u) ** 3 / 6.0,
            (3 * u**3 - 6 * u**2 + 4) / 6.0,
            (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6.0,
            u**3 / 6.0,
        ]
    )


def naive_displacement(cg, point):
    """Direct 64-term tensor-product evaluation (independent oracle)."""
    out = np.zeros(3)
    ox, oy, oz = cg.origin
    lx = (point[0] - ox) / cg.cspacing[0]
    ly = (point[1] - oy) / cg.cspacing[1]
    lz = (point[2] - oz) / cg.cspacing[2]
    ix = min(int(np.floor(lx)), cg.cdims[0] - 3)
    iy = min(int(np.floor(ly)), cg.cdims[1] - 3)
    iz = min(int(np.floor(lz)), cg.cdims[2] - 3)
    wx = _cubic_weights(lx - ix)
    wy = _cubic_weights(ly - iy)
    wz = _cubic_weights(lz - iz)
    for c in range(4):
        for b in range(4):
            for a in range(4):
                w = wx[a] * wy[b] * wz[c]
                out += w * cg.disp[iz - 1 + c, iy - 1 + b, ix - 1 + a]
    return out


def naive_trilinear(values, p):
    """Scalar trilinear sample with explicit corner arithmetic."""
    nz, ny, nx = values.shape
    x, y, z = p
    if not (0 <= x <= nx - 1 and 0 <= y <= ny - 1 and 0 <= z <= nz - 1):
        return None
    i0 = min(int(np.floor(x)), nx - 2)
    j0 = min(int(np.floor(y)), ny - 2)
    k0 = min(int(np.floor(z)), nz - 2)
    fx, fy, fz = x - i0, y - j0, z - k0
    acc = 0.0
    for dk in (0, 1):
        for dj in (0, 1):
            for di in (0, 1):
                w = (fx if di else 1 - fx) * (fy if dj else 1 - fy) * (fz if dk else 1 - fz)
                acc += w * float(values[k0 + dk, j0 + dj, i0 + di])
    return acc
