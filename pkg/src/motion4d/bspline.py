"""Cubic B-spline free-form deformation.

A :class:`ControlGrid` holds one displacement 3-vector per control point
of a uniform cubic B-spline lattice that covers the image extent plus one
knot margin on every side.  The displacement convention is pull-back: the
warped image samples the reference at ``x + u(x)``, so the adjoint of
warp-and-extract is a plain trilinear scatter.

Because both the image grid and the knot lattice are axis-aligned, the
spline weight along each axis depends only on that axis' voxel index.
Field evaluation and its adjoint therefore factor into three small dense
matrix contractions (one per axis), which is what makes the fitting loops
fast enough in pure numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError
from .volgrid import AIR_HU, Grid3, Volume, Segment, _read_json, _read_payload, _write_json, _write_payload


def basis_weights(u: float) -> np.ndarray:
    """The four uniform cubic B-spline weights at cell fraction ``u``.

    Returns ``((1-u)^3, 3u^3-6u^2+4, -3u^3+3u^2+3u+1, u^3) / 6``; the
    weights sum to one.
    """
    if not (0.0 <= u < 1.0) or not math.isfinite(u):
        raise ValueError(f"cell fraction must lie in [0, 1), got {u}")
    return _basis_rows(np.asarray([u], dtype=np.float64))[0]


def _basis_rows(u: np.ndarray) -> np.ndarray:
    """Vectorised basis weights; ``u`` may be any shape, result appends axis 4."""
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    w = np.empty(u.shape + (4,), dtype=np.float64)
    w[..., 0] = (1.0 - u) ** 3
    w[..., 1] = 3.0 * u3 - 6.0 * u2 + 4.0
    w[..., 2] = -3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0
    w[..., 3] = u3
    return w / 6.0


def _anchored_origin(image_grid: Grid3, cspacing, axis: int) -> float:
    """First-knot position: the largest multiple of the knot spacing that
    still leaves one full knot margin before the image origin.

    Anchoring to absolute multiples makes the lattices of a resolution
    pyramid nest exactly whenever spacings halve (or repeat) between
    levels, so coarse-level transforms stay exactly representable after
    refinement.
    """
    csp = float(cspacing[axis])
    return csp * math.floor((image_grid.origin[axis] - csp) / csp + 1e-12)


@dataclass
class ControlGrid:
    """Displacement coefficients of a B-spline lattice deforming ``image_grid``.

    ``disp`` has shape (ncz, ncy, ncx, 3) in mm, components ordered
    (ux, uy, uz).  The lattice starts at least one knot spacing before the
    image origin (see :func:`_anchored_origin`) so every voxel centre has
    a full 4x4x4 support.
    """

    cdims: tuple[int, int, int]
    cspacing: tuple[float, float, float]
    image_grid: Grid3
    disp: np.ndarray

    def __post_init__(self):
        self.cdims = tuple(int(d) for d in self.cdims)
        self.cspacing = tuple(float(s) for s in self.cspacing)
        if any(d < 4 for d in self.cdims):
            raise ValueError(f"control dims must be >= 4 per axis, got {self.cdims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.cspacing):
            raise ValueError(f"control spacing must be finite positive, got {self.cspacing}")
        d = np.asarray(self.disp, dtype=np.float64)
        shape = (self.cdims[2], self.cdims[1], self.cdims[0], 3)
        if d.size != int(np.prod(shape)):
            raise ValueError(f"expected {np.prod(shape)} displacement components, got {d.size}")
        d = np.ascontiguousarray(d.reshape(shape))
        if not np.all(np.isfinite(d)):
            raise ValueError("control displacements contain non-finite values")
        self.disp = d
        # Coverage: the last voxel centre must still have 4 supporting knots.
        for a in range(3):
            hi = self.image_grid.origin[a] + (self.image_grid.dims[a] - 1) * self.image_grid.spacing[a]
            s_max = (hi - self.origin[a]) / self.cspacing[a]
            if math.floor(s_max + 1e-9) + 2 > self.cdims[a] - 1:
                raise GeometryError(
                    f"control lattice does not cover image extent on axis {a}"
                )

    @classmethod
    def create(cls, image_grid: Grid3, cspacing: tuple[float, float, float]) -> "ControlGrid":
        """Zero-displacement lattice covering ``image_grid`` plus one knot margin."""
        cspacing = tuple(float(s) for s in cspacing)
        cdims = []
        for a in range(3):
            hi = image_grid.origin[a] + (image_grid.dims[a] - 1) * image_grid.spacing[a]
            s_max = (hi - _anchored_origin(image_grid, cspacing, a)) / cspacing[a]
            cdims.append(int(math.floor(s_max + 1e-9)) + 3)
        shape = (cdims[2], cdims[1], cdims[0], 3)
        return cls(tuple(cdims), cspacing, image_grid, np.zeros(shape))

    @property
    def origin(self) -> tuple[float, float, float]:
        return tuple(_anchored_origin(self.image_grid, self.cspacing, a) for a in range(3))

    def same_lattice(self, other: "ControlGrid") -> bool:
        return (
            self.cdims == other.cdims
            and self.cspacing == other.cspacing
            and self.image_grid == other.image_grid
        )

    def copy(self) -> "ControlGrid":
        return ControlGrid(self.cdims, self.cspacing, self.image_grid, self.disp.copy())

    def zeros_like(self) -> "ControlGrid":
        return ControlGrid(self.cdims, self.cspacing, self.image_grid, np.zeros_like(self.disp))

    def with_disp(self, disp: np.ndarray) -> "ControlGrid":
        return ControlGrid(self.cdims, self.cspacing, self.image_grid, disp)


# ---------------------------------------------------------------------------
# Separable basis matrices
# ---------------------------------------------------------------------------


def _axis_matrix_from_coords(rel_mm: np.ndarray, csp: float, nc: int) -> np.ndarray:
    """Dense (n, nc) spline weights for sample coordinates ``rel_mm``
    measured from the first knot along one axis."""
    local = rel_mm / csp  # lattice units
    t0 = np.floor(local).astype(np.int64)
    u = local - t0
    # Points exactly on the far hull land on u == 0 of the next cell.
    w = _basis_rows(u)
    cols = (t0 - 1)[:, None] + np.arange(4)[None, :]
    if cols.min() < 0 or cols.max() > nc - 1:
        raise GeometryError("sample point outside the supported lattice extent")
    mat = np.zeros((rel_mm.size, nc), dtype=np.float64)
    np.put_along_axis(mat, cols, w, axis=1)
    return mat


@lru_cache(maxsize=64)
def _basis_matrices(image_grid: Grid3, cdims: tuple, cspacing: tuple):
    """Per-axis (n_vox, n_ctrl) weight matrices for a (grid, lattice) pair."""
    mats = []
    for a in range(3):
        corigin = _anchored_origin(image_grid, cspacing, a)
        rel = image_grid.axis_coords(a) - corigin
        m = _axis_matrix_from_coords(rel, cspacing[a], cdims[a])
        m.setflags(write=False)
        mats.append(m)
    return tuple(mats)  # (Bx, By, Bz)


def _apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(mat, arr, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def displacement_field(cg: ControlGrid, z_lo: int = 0, z_hi: int | None = None) -> np.ndarray:
    """Displacements (mm) at every voxel centre of slices ``z_lo..z_hi``.

    Returns shape (n_slices, ny, nx, 3).
    """
    nz = cg.image_grid.dims[2]
    if z_hi is None:
        z_hi = nz - 1
    bx, by, bz = _basis_matrices(cg.image_grid, cg.cdims, cg.cspacing)
    out = _apply_axis(bz[z_lo : z_hi + 1], cg.disp, 0)
    out = _apply_axis(by, out, 1)
    out = _apply_axis(bx, out, 2)
    return out


def scatter_to_controls(cg: ControlGrid, voxel_vectors: np.ndarray, z_lo: int, z_hi: int) -> np.ndarray:
    """Adjoint of :func:`displacement_field` restricted to a slab.

    ``voxel_vectors`` has shape (n_slices, ny, nx, 3); the result is a
    control-shaped (ncz, ncy, ncx, 3) accumulation.
    """
    bx, by, bz = _basis_matrices(cg.image_grid, cg.cdims, cg.cspacing)
    out = _apply_axis(bz[z_lo : z_hi + 1].T, voxel_vectors, 0)
    out = _apply_axis(by.T, out, 1)
    out = _apply_axis(bx.T, out, 2)
    return out


def displacement_at(cg: ControlGrid, points: np.ndarray) -> np.ndarray:
    """Displacement (mm) at arbitrary world points inside the image extent.

    ``points`` is (..., 3); evaluation is the direct 4x4x4 tensor-product
    sum over the neighbouring control displacements.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing axis of length 3")
    for a, (lo, hi) in enumerate(cg.image_grid.extent()):
        pa = pts[..., a]
        if np.any(pa < lo) or np.any(pa > hi):
            raise IndexError(f"point outside image extent on axis {a}")
    weights = []
    starts = []
    for a in range(3):
        local = (pts[..., a] - cg.origin[a]) / cg.cspacing[a]
        t0 = np.floor(local).astype(np.int64)
        # The far hull may land exactly on the last interior knot.
        t0 = np.minimum(t0, cg.cdims[a] - 3)
        weights.append(_basis_rows(local - t0))
        starts.append(t0 - 1)
    out = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
    for c in range(4):
        for b in range(4):
            wyz = weights[1][..., b] * weights[2][..., c]
            for a in range(4):
                w = weights[0][..., a] * wyz
                out += w[..., None] * cg.disp[starts[2] + c, starts[1] + b, starts[0] + a]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Trilinear sampling
# ---------------------------------------------------------------------------


def trilinear_gather(values: np.ndarray, px, py, pz, gradient: bool = False):
    """Sample ``values`` (nz, ny, nx) at voxel-unit positions.

    Positions outside the voxel-centre hull are flagged in the returned
    ``inside`` mask; their sample (and gradient) entries are computed from
    clamped coordinates and must be masked by the caller.  With
    ``gradient=True`` also returns d(value)/d(px,py,pz) in voxel units.
    """
    nz, ny, nx = values.shape
    inside = (
        (px >= 0.0) & (px <= nx - 1)
        & (py >= 0.0) & (py <= ny - 1)
        & (pz >= 0.0) & (pz <= nz - 1)
    )
    cx = np.clip(px, 0.0, nx - 1)
    cy = np.clip(py, 0.0, ny - 1)
    cz = np.clip(pz, 0.0, nz - 1)
    i0 = np.minimum(cx.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(cx, dtype=np.int64)
    j0 = np.minimum(cy.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(cy, dtype=np.int64)
    k0 = np.minimum(cz.astype(np.int64), nz - 2) if nz > 1 else np.zeros_like(cz, dtype=np.int64)
    fx = cx - i0
    fy = cy - j0
    fz = cz - k0
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    k1 = np.minimum(k0 + 1, nz - 1)

    c000 = values[k0, j0, i0]
    c100 = values[k0, j0, i1]
    c010 = values[k0, j1, i0]
    c110 = values[k0, j1, i1]
    c001 = values[k1, j0, i0]
    c101 = values[k1, j0, i1]
    c011 = values[k1, j1, i0]
    c111 = values[k1, j1, i1]

    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    v00 = c000 * gx + c100 * fx
    v10 = c010 * gx + c110 * fx
    v01 = c001 * gx + c101 * fx
    v11 = c011 * gx + c111 * fx
    v0 = v00 * gy + v10 * fy
    v1 = v01 * gy + v11 * fy
    val = v0 * gz + v1 * fz

    if not gradient:
        return val, inside

    dx = (
        (c100 - c000) * gy * gz
        + (c110 - c010) * fy * gz
        + (c101 - c001) * gy * fz
        + (c111 - c011) * fy * fz
    )
    dy = (v10 - v00) * gz + (v11 - v01) * fz
    dz = v1 - v0
    return val, dx, dy, dz, inside


def trilinear_corners(dims: tuple[int, int, int], px, py, pz):
    """Corner indices and weights for scattering at voxel-unit positions.

    Returns ``(inside, (i0, j0, k0), (fx, fy, fz))`` with the same clamping
    rules as :func:`trilinear_gather`.
    """
    nx, ny, nz = dims
    inside = (
        (px >= 0.0) & (px <= nx - 1)
        & (py >= 0.0) & (py <= ny - 1)
        & (pz >= 0.0) & (pz <= nz - 1)
    )
    cx = np.clip(px, 0.0, nx - 1)
    cy = np.clip(py, 0.0, ny - 1)
    cz = np.clip(pz, 0.0, nz - 1)
    i0 = np.minimum(cx.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(cx, dtype=np.int64)
    j0 = np.minimum(cy.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(cy, dtype=np.int64)
    k0 = np.minimum(cz.astype(np.int64), nz - 2) if nz > 1 else np.zeros_like(cz, dtype=np.int64)
    return inside, (i0, j0, k0), (cx - i0, cy - j0, cz - k0)


def segment_positions(cg: ControlGrid, z_lo: int, z_hi: int):
    """Warped sample positions (voxel units) for every voxel of a slab."""
    grid = cg.image_grid
    u = displacement_field(cg, z_lo, z_hi)
    nx, ny, _ = grid.dims
    sx, sy, sz = grid.spacing
    shape = (z_hi - z_lo + 1, ny, nx)
    px = np.broadcast_to(np.arange(nx, dtype=np.float64)[None, None, :], shape) + u[..., 0] / sx
    py = np.broadcast_to(np.arange(ny, dtype=np.float64)[None, :, None], shape) + u[..., 1] / sy
    pz = np.broadcast_to(
        np.arange(z_lo, z_hi + 1, dtype=np.float64)[:, None, None], shape
    ) + u[..., 2] / sz
    return px, py, pz


# ---------------------------------------------------------------------------
# Warping and the segment objective
# ---------------------------------------------------------------------------


def warp_volume(ref: Volume, cg: ControlGrid, fill: float = AIR_HU) -> Volume:
    """Resample ``ref`` through the deformation: output voxel ``x`` takes
    the trilinear sample of ``ref`` at ``x + u(x)``; samples leaving the
    extent take ``fill`` (air by default)."""
    if cg.image_grid != ref.grid:
        raise GeometryError("control grid does not deform this volume's grid")
    px, py, pz = segment_positions(cg, 0, ref.grid.dims[2] - 1)
    vals, inside = trilinear_gather(ref.values.astype(np.float64), px, py, pz)
    return Volume(ref.grid, np.where(inside, vals, fill))


def _check_segment_geometry(ref: Volume, cg: ControlGrid, seg: Segment) -> None:
    if seg.parent_grid != ref.grid:
        raise GeometryError("segment was extracted from a different grid")
    if cg.image_grid != ref.grid:
        raise GeometryError("control grid does not deform this volume's grid")


def residual_and_gradient(ref: Volume, cg: ControlGrid, seg: Segment):
    """Sum of squared residuals over one segment and its control gradient.

    The residual at a slab voxel is ``sample(ref, x + u(x)) - seg(x)``
    (air-filled when the sample leaves the extent).  The gradient chains
    ``2 * residual`` through the trilinear image gradient and the spline
    weights onto each voxel's 4x4x4 control support; out-of-extent samples
    keep their residual but contribute no gradient.

    Returns ``(sse, grad)`` with ``grad`` shaped like ``cg.disp``.
    """
    _check_segment_geometry(ref, cg, seg)
    px, py, pz = segment_positions(cg, seg.z_lo, seg.z_hi)
    val, dx, dy, dz, inside = trilinear_gather(
        ref.values.astype(np.float64), px, py, pz, gradient=True
    )
    est = np.where(inside, val, AIR_HU)
    r = est - seg.values.astype(np.float64)
    sse = float(np.dot(r.ravel(), r.ravel()))
    w = np.where(inside, 2.0 * r, 0.0)
    sx, sy, sz = ref.grid.spacing
    gvec = np.stack((w * dx / sx, w * dy / sy, w * dz / sz), axis=-1)
    grad = scatter_to_controls(cg, gvec, seg.z_lo, seg.z_hi)
    return sse, grad


def residual_sse(ref: Volume, cg: ControlGrid, seg: Segment) -> float:
    """Objective-only evaluation of the segment residual (no gradient)."""
    _check_segment_geometry(ref, cg, seg)
    px, py, pz = segment_positions(cg, seg.z_lo, seg.z_hi)
    val, inside = trilinear_gather(ref.values.astype(np.float64), px, py, pz)
    r = np.where(inside, val, AIR_HU) - seg.values.astype(np.float64)
    return float(np.dot(r.ravel(), r.ravel()))


# ---------------------------------------------------------------------------
# Lattice refinement and serialization
# ---------------------------------------------------------------------------


def refit_control_grid(cg: ControlGrid, image_grid: Grid3, cspacing: tuple[float, float, float]) -> ControlGrid:
    """Least-squares refit of a displacement field onto a new lattice.

    The coarse field is evaluated on the new grid's voxel centres (probe
    positions clamped into the coarse extent) and the new coefficients
    solve the separable normal equations per axis.  When the coarse field
    lies in the fine spline space (knot subdivision) the fit is exact to
    rounding.
    """
    target = ControlGrid.create(image_grid, cspacing)
    # Probe the coarse field at the fine voxel centres, clamped into the
    # span where the coarse spline still has full support (wider than the
    # coarse image extent by the knot margins).
    mats_src = []
    for a in range(3):
        lo = cg.origin[a] + cg.cspacing[a]
        hi = cg.origin[a] + (cg.cdims[a] - 2) * cg.cspacing[a]
        coords = np.clip(image_grid.axis_coords(a), lo, hi)
        mats_src.append(
            _axis_matrix_from_coords(coords - cg.origin[a], cg.cspacing[a], cg.cdims[a])
        )
    u = _apply_axis(mats_src[2], cg.disp, 0)
    u = _apply_axis(mats_src[1], u, 1)
    u = _apply_axis(mats_src[0], u, 2)
    # Separable least squares onto the target lattice.
    bx, by, bz = _basis_matrices(image_grid, target.cdims, target.cspacing)
    coeff = u
    for axis, mat in ((0, bz), (1, by), (2, bx)):
        gram = mat.T @ mat
        gram = gram + np.eye(gram.shape[0]) * (1e-12 * np.trace(gram) / gram.shape[0])
        rhs = _apply_axis(mat.T, coeff, axis)
        coeff = _apply_axis(np.linalg.inv(gram), rhs, axis)
    return target.with_disp(coeff)


def write_control_grid(cg: ControlGrid, path: str | Path) -> None:
    path = Path(path)
    header = {
        "kind": "control_grid",
        "cdims": list(cg.cdims),
        "cspacing_mm": list(cg.cspacing),
        "image": cg.image_grid.to_json(),
        "dtype": "f32le",
    }
    header["data_file"] = _write_payload(path, cg.disp, "f32le")
    _write_json(path, header)


def read_control_grid(path: str | Path) -> ControlGrid:
    path = Path(path)
    header = _read_json(path)
    if header.get("kind") != "control_grid":
        raise FormatError(f"{path}: not a control grid file")
    grid = Grid3.from_json(header.get("image", {}))
    try:
        cdims = tuple(int(d) for d in header["cdims"])
        csp = tuple(float(s) for s in header["cspacing_mm"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad lattice metadata: {e}") from e
    arr = _read_payload(path, header, int(np.prod(cdims)) * 3)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    try:
        return ControlGrid(cdims, csp, grid, arr.astype(np.float64))
    except (ValueError, GeometryError) as e:
        raise FormatError(f"{path}: {e}") from e
