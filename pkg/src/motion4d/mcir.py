"""Motion-compensated iterative reconstruction of the reference volume.

With the motion model fixed, every segment voxel is a linear measurement
of the reference image (trilinear weights at its warped sample position),
so the shared objective is exactly quadratic in the reference.  Steps are
plain gradient descent: the gradient is assembled by scattering segment
residuals back through the warp (the exact transpose of warp-and-extract)
and the initial step length is the quadratic line minimiser, safeguarded
by the same Armijo backtracking used for the model fit.  Voxels never hit
by any warped sample accumulate zero weight and are left unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import bspline
from .bspline import ControlGrid, segment_positions, trilinear_corners, trilinear_gather
from .errors import GeometryError, NumericalError
from .surrmodel import (
    ARMIJO_C,
    CONTRACTION,
    MAX_BACKTRACKS,
    TOL_F,
    MotionModel,
    SurrogateMatrix,
    _check_segments,
    compose_motion,
)
from .volgrid import AIR_HU, Grid3, Segment, Volume


@dataclass
class ReconState:
    iteration: int = 0
    history: list = field(default_factory=list)
    step_prev: float = 0.0


def _corner_scatter(flat_acc, flat_w, dims, idx, frac, values):
    """Scatter ``values`` (and pure weights) to the 8 trilinear corners."""
    nx, ny, nz = dims
    i0, j0, k0 = idx
    fx, fy, fz = frac
    nvox = nx * ny * nz
    for dk in (0, 1):
        wz = fz if dk else 1.0 - fz
        for dj in (0, 1):
            wy = fy if dj else 1.0 - fy
            for di in (0, 1):
                wx = fx if di else 1.0 - fx
                w = wx * wy * wz
                flat = ((k0 + dk) * ny + (j0 + dj)) * nx + (i0 + di)
                flat_acc += np.bincount(flat, weights=w * values, minlength=nvox)
                flat_w += np.bincount(flat, weights=w, minlength=nvox)


def adjoint_scatter(
    seg_residual: Segment,
    cg: ControlGrid,
    accum: np.ndarray,
    weights: np.ndarray,
) -> None:
    """Scatter a segment's residuals to the 8 source voxels of each warped
    sample (transpose of warp-then-extract); ``weights`` receives the bare
    trilinear coefficients.  Both arrays are updated in place and must be
    float64 with the reference volume's (nz, ny, nx) shape."""
    grid = cg.image_grid
    if seg_residual.parent_grid != grid:
        raise GeometryError("segment was extracted from a different grid")
    if accum.shape != grid.shape_zyx or weights.shape != grid.shape_zyx:
        raise GeometryError("accumulator shape does not match the image grid")
    px, py, pz = segment_positions(cg, seg_residual.z_lo, seg_residual.z_hi)
    inside, idx, frac = trilinear_corners(grid.dims, px, py, pz)
    keep = inside.ravel()
    vals = seg_residual.values.astype(np.float64).ravel()[keep]
    idx = tuple(a.ravel()[keep] for a in idx)
    frac = tuple(a.ravel()[keep] for a in frac)
    flat_acc = accum.reshape(-1)
    flat_w = weights.reshape(-1)
    _corner_scatter(flat_acc, flat_w, grid.dims, idx, frac, vals)


def _composed(S: SurrogateMatrix, C: MotionModel, segs: Sequence[Segment]):
    return {seg.t: compose_motion(S, C, seg.t) for seg in segs}


def _forward_linear(values64: np.ndarray, cg: ControlGrid, seg: Segment) -> np.ndarray:
    """Linear part of warp-and-extract (out-of-extent samples read as 0)."""
    px, py, pz = segment_positions(cg, seg.z_lo, seg.z_hi)
    vals, inside = trilinear_gather(values64, px, py, pz)
    return np.where(inside, vals, 0.0)


def _objective_values(values64, cgs, segs) -> float:
    total = 0.0
    for seg in segs:
        px, py, pz = segment_positions(cgs[seg.t], seg.z_lo, seg.z_hi)
        vals, inside = trilinear_gather(values64, px, py, pz)
        r = np.where(inside, vals, AIR_HU) - seg.values.astype(np.float64)
        total += float(np.dot(r.ravel(), r.ravel()))
    return total


def stack_segments(segs: Sequence[Segment], grid: Grid3) -> tuple[Volume, np.ndarray]:
    """Weight-normalised scatter of raw segments under zero motion.

    Used to initialise the reference when no sorted phase volumes exist;
    voxels observed by no segment are filled with air.  Returns the volume
    and the accumulated weights.
    """
    accum = np.zeros(grid.shape_zyx, dtype=np.float64)
    weights = np.zeros(grid.shape_zyx, dtype=np.float64)
    zero = ControlGrid.create(grid, tuple(4.0 * s for s in grid.spacing))
    for seg in segs:
        adjoint_scatter(seg, zero, accum, weights)
    vals = np.where(weights > 0, accum / np.maximum(weights, 1e-300), AIR_HU)
    return Volume(grid, vals), weights


def mcir_step(
    i0: Volume,
    S: SurrogateMatrix,
    C: MotionModel,
    segs: Sequence[Segment],
    state: ReconState,
):
    """One reconstruction update of the reference volume."""
    _check_segments(S, segs)
    grid = i0.grid
    if C.lattice.image_grid != grid:
        raise GeometryError("motion model does not deform the reference grid")
    segs = sorted(segs, key=lambda s: s.t)
    cgs = _composed(S, C, segs)
    values = i0.values.astype(np.float64)

    grad = np.zeros(grid.shape_zyx, dtype=np.float64)
    weights = np.zeros(grid.shape_zyx, dtype=np.float64)
    f0 = 0.0
    for seg in segs:
        cg = cgs[seg.t]
        px, py, pz = segment_positions(cg, seg.z_lo, seg.z_hi)
        vals, inside = trilinear_gather(values, px, py, pz)
        r = np.where(inside, vals, AIR_HU) - seg.values.astype(np.float64)
        f0 += float(np.dot(r.ravel(), r.ravel()))
        res_seg = Segment(grid, seg.z_lo, seg.z_hi, seg.t, np.where(inside, r, 0.0))
        adjoint_scatter(res_seg, cg, grad, weights)
    grad *= 2.0
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite reconstruction gradient (f={f0!r})")

    new_state = ReconState(
        iteration=state.iteration + 1,
        history=state.history + [f0],
        step_prev=0.0,
    )
    gnorm2 = float((grad**2).sum())
    if gnorm2 == 0.0:
        return i0, new_state

    # Exact line minimum of the quadratic along -grad, then backtrack on the
    # float32-rounded candidate so accepted objectives never increase.
    den = 0.0
    for seg in segs:
        ad = _forward_linear(grad, cgs[seg.t], seg)
        den += float(np.dot(ad.ravel(), ad.ravel()))
    if den == 0.0:
        return i0, new_state
    lam0 = gnorm2 / (2.0 * den)
    accepted = None
    for m in range(MAX_BACKTRACKS + 1):
        lam = lam0 * CONTRACTION**m
        trial = (values - lam * grad).astype(np.float32)
        f_try = _objective_values(trial.astype(np.float64), cgs, segs)
        if f_try <= f0 - ARMIJO_C * lam * gnorm2:
            accepted = (trial, f_try, lam)
            break
    if accepted is None:
        return i0, new_state
    trial, f_try, lam = accepted
    new_state.history[-1] = f_try
    new_state.step_prev = lam
    return Volume(grid, trial), new_state


def mcir_run(
    i0: Volume,
    S: SurrogateMatrix,
    C: MotionModel,
    segs: Sequence[Segment],
    max_iters: int,
    tol_f: float = TOL_F,
    callback: Callable[[ReconState], None] | None = None,
):
    """Iterate :func:`mcir_step` until the objective stops improving."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    state = ReconState()
    f_prev = None
    for _ in range(max_iters):
        i0, state = mcir_step(i0, S, C, segs, state)
        if callback is not None:
            callback(state)
        f_now = state.history[-1]
        if state.step_prev == 0.0:
            break
        if f_prev is not None and f_prev - f_now < tol_f * max(abs(f_prev), 1e-30):
            break
        f_prev = f_now
    return i0, state


def coverage_weights(S: SurrogateMatrix, C: MotionModel, segs: Sequence[Segment]) -> np.ndarray:
    """Total trilinear weight each reference voxel receives from all
    segments under the current motion (zero = never observed)."""
    grid = C.lattice.image_grid
    accum = np.zeros(grid.shape_zyx, dtype=np.float64)
    weights = np.zeros(grid.shape_zyx, dtype=np.float64)
    for seg in sorted(segs, key=lambda s: s.t):
        zero_res = Segment(grid, seg.z_lo, seg.z_hi, seg.t, np.zeros_like(seg.values))
        adjoint_scatter(zero_res, compose_motion(S, C, seg.t), accum, weights)
    return weights
