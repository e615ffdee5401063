"""Surrogate-driven motion model: per-timepoint transform composition,
the global segment-matching objective, and gradient-descent fitting of
the spatial correspondence models with an Armijo backtracking line
search.

The model is ``M_t = sum_i S[i, t] * C_i`` where ``S`` holds one signal
value per (signal, timepoint) and each ``C_i`` is a control-point
displacement field.  All timepoints share the same ``C_i``; a timepoint
without a segment simply contributes no residual term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bspline
from .bspline import ControlGrid
from .errors import FormatError, GeometryError, NumericalError
from .volgrid import Segment, Volume

# Line-search constants (shared with MCIR).
ARMIJO_C = 1e-4
CONTRACTION = 0.5
MAX_BACKTRACKS = 12
STEP_FRACTION = 0.5  # initial step moves the largest control point this x spacing
TOL_F = 1e-4  # relative objective decrease considered progress


@dataclass
class SurrogateMatrix:
    """N_s x N_t signal values; row i is signal i over time."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("surrogate matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("surrogate matrix contains non-finite values")
        self.values = v

    @property
    def n_signals(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "SurrogateMatrix":
        return SurrogateMatrix(self.values.copy())

    def to_csv(self, path: str | Path) -> None:
        """One row per timepoint: ``t,s1,s2,...``."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + [f"s{i + 1}" for i in range(self.n_signals)])
            for t in range(self.n_times):
                w.writerow([t] + [repr(float(x)) for x in self.values[:, t]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SurrogateMatrix":
        try:
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise FormatError(f"{path}: {e}") from e
        if not rows or not rows[0] or rows[0][0] != "t":
            raise FormatError(f"{path}: expected header 't,s1,s2,...'")
        n_sig = len(rows[0]) - 1
        if n_sig < 1:
            raise FormatError(f"{path}: no signal columns")
        try:
            data = np.array(
                [[float(x) for x in row[1:]] for row in rows[1:]], dtype=np.float64
            )
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from e
        if data.ndim != 2 or data.shape[1] != n_sig or data.shape[0] < 1:
            raise FormatError(f"{path}: ragged or empty signal table")
        return cls(data.T)


@dataclass
class MotionModel:
    """The spatial correspondence models, one ControlGrid per signal."""

    grids: list[ControlGrid]

    def __post_init__(self):
        if len(self.grids) < 1:
            raise ValueError("motion model needs at least one correspondence grid")
        base = self.grids[0]
        for g in self.grids[1:]:
            if not base.same_lattice(g):
                raise GeometryError("correspondence grids must share one lattice")

    @classmethod
    def zeros(cls, template: ControlGrid, n_signals: int) -> "MotionModel":
        return cls([template.zeros_like() for _ in range(n_signals)])

    @property
    def n_signals(self) -> int:
        return len(self.grids)

    @property
    def lattice(self) -> ControlGrid:
        return self.grids[0]

    def stacked(self) -> np.ndarray:
        """(N_s, ncz, ncy, ncx, 3) view used by the solvers."""
        return np.stack([g.disp for g in self.grids])

    def with_stacked(self, arr: np.ndarray) -> "MotionModel":
        return MotionModel([self.grids[i].with_disp(arr[i]) for i in range(len(self.grids))])

    def copy(self) -> "MotionModel":
        return MotionModel([g.copy() for g in self.grids])


@dataclass
class FitState:
    """Bookkeeping carried between fit iterations.

    ``grads_prev``/``grads_prev2`` cache the per-timepoint model-space
    gradients of the two most recent iterations (consumed by the
    hypergradient update); ``step_prev`` is the last accepted step length
    (0 when the step was rejected).
    """

    iteration: int = 0
    history: list = field(default_factory=list)
    grads_prev: dict | None = None
    grads_prev2: dict | None = None
    step_prev: float = 0.0


def compose_motion(S: SurrogateMatrix, C: MotionModel, t: int) -> ControlGrid:
    """Per-timepoint transform ``M_t``: control-point-wise sum of the
    correspondence grids weighted by column ``t`` of the signals."""
    if S.n_signals != C.n_signals:
        raise GeometryError(
            f"{S.n_signals} signals vs {C.n_signals} correspondence grids"
        )
    if not (0 <= t < S.n_times):
        raise IndexError(f"timepoint {t} outside [0, {S.n_times})")
    disp = np.zeros_like(C.grids[0].disp)
    for i in range(C.n_signals):
        disp += S.values[i, t] * C.grids[i].disp
    return C.lattice.with_disp(disp)


def _check_segments(S: SurrogateMatrix, segs: Sequence[Segment]) -> None:
    seen = set()
    for seg in segs:
        if seg.t >= S.n_times:
            raise IndexError(f"segment timepoint {seg.t} outside [0, {S.n_times})")
        if seg.t in seen:
            raise ValueError(f"two segments share timepoint {seg.t}")
        seen.add(seg.t)


def objective(i0: Volume, S: SurrogateMatrix, C: MotionModel, segs: Sequence[Segment]) -> float:
    """Total squared segment mismatch of the current model and reference."""
    _check_segments(S, segs)
    total = 0.0
    for seg in sorted(segs, key=lambda s: s.t):
        total += bspline.residual_sse(i0, compose_motion(S, C, seg.t), seg)
    return total


def model_gradients(i0: Volume, S: SurrogateMatrix, C: MotionModel, segs: Sequence[Segment]):
    """Objective value and per-timepoint gradients w.r.t. ``M_t``.

    Returns ``(f, grads)`` with ``grads[t]`` shaped like a control
    displacement array.
    """
    _check_segments(S, segs)
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for seg in sorted(segs, key=lambda s: s.t):
        sse, g = bspline.residual_and_gradient(i0, compose_motion(S, C, seg.t), seg)
        total += sse
        grads[seg.t] = g
    return total, grads


def aggregate_gradient(S: SurrogateMatrix, grads: dict, n_signals: int) -> np.ndarray:
    """Chain per-timepoint gradients back onto the correspondence models:
    ``dF/dC_i = sum_t S[i, t] * grad_t``; shape (N_s, ncz, ncy, ncx, 3)."""
    ts = sorted(grads)
    first = grads[ts[0]]
    out = np.zeros((n_signals,) + first.shape, dtype=np.float64)
    for t in ts:
        g = grads[t]
        for i in range(n_signals):
            out[i] += S.values[i, t] * g
    return out


def fit_step(state: FitState, i0: Volume, S: SurrogateMatrix, C: MotionModel, segs: Sequence[Segment]):
    """One gradient-descent update of the correspondence models.

    The step direction is the aggregated negative gradient; the length
    starts at the value that moves the largest control point by
    ``STEP_FRACTION`` of a knot spacing and backtracks (Armijo) until the
    objective does not increase.  A step that cannot be accepted leaves
    ``C`` unchanged and records ``step_prev = 0``.
    """
    f0, grads = model_gradients(i0, S, C, segs)
    G = aggregate_gradient(S, grads, C.n_signals)
    if not np.all(np.isfinite(G)):
        raise NumericalError(
            f"non-finite model gradient at iteration {state.iteration} (f={f0!r})"
        )
    gmax = float(np.sqrt((G**2).sum(axis=-1)).max())
    new_state = FitState(
        iteration=state.iteration + 1,
        history=state.history + [f0],
        grads_prev=grads,
        grads_prev2=state.grads_prev,
        step_prev=0.0,
    )
    if gmax == 0.0:
        return C, new_state

    gnorm2 = float((G**2).sum())
    stacked = C.stacked()
    lam0 = STEP_FRACTION * min(C.lattice.cspacing) / gmax
    accepted = None
    for m in range(MAX_BACKTRACKS + 1):
        lam = lam0 * CONTRACTION**m
        trial = C.with_stacked(stacked - lam * G)
        f_try = objective(i0, S, trial, segs)
        if f_try <= f0 - ARMIJO_C * lam * gnorm2:
            accepted = (trial, f_try, lam)
            break
    if accepted is None:
        return C, new_state
    trial, f_try, lam = accepted
    new_state.history[-1] = f_try
    new_state.step_prev = lam
    return trial, new_state


def fit_run(
    i0: Volume,
    S: SurrogateMatrix,
    C: MotionModel,
    segs: Sequence[Segment],
    max_iters: int,
    tol_f: float = TOL_F,
):
    """Repeat :func:`fit_step` until the objective stops improving.

    Stops on a rejected step or when the relative decrease over one
    iteration falls below ``tol_f``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    state = FitState()
    f_prev = None
    for _ in range(max_iters):
        C, state = fit_step(state, i0, S, C, segs)
        f_now = state.history[-1]
        if state.step_prev == 0.0:
            break
        if f_prev is not None and f_prev - f_now < tol_f * max(abs(f_prev), 1e-30):
            break
        f_prev = f_now
    return C, state
