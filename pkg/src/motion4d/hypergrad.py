"""Surrogate signals as optimisable hyperparameters.

The derivative of the fitting objective with respect to each signal
sample is assembled from quantities the model fit already computed: with
``g_t^(k) = grad of f w.r.t. M_t at iteration k``,

    h[i, t] = < C_i - lam * S[i, t] * g_t(prev) , g_t(cur) >

where the ``lam`` term differentiates through the previous model update
(dropped on the first iteration, where the plain partial derivative
remains).  Signals then move by ``S <- S - alpha * h``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSignalWarning, GeometryError, NumericalError
from .phantom import RespTrace  # light import: RespTrace is a plain dataclass
from .surrmodel import MotionModel, SurrogateMatrix

EPS_STD = 1e-12


@dataclass
class HyperGradient:
    """d(objective)/d(signal sample), same shape as the surrogate matrix."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(v)):
            raise ValueError("hypergradient contains non-finite values")
        self.values = v


def compute_hypergradient(
    C_km1: MotionModel,
    grad_km2: dict | None,
    grad_km1: dict,
    S_km1: SurrogateMatrix,
    lambda_km1: float,
) -> HyperGradient:
    """Assemble the signal gradient from two cached fit iterations.

    ``grad_km1``/``grad_km2`` map timepoint -> model-space gradient from
    the latest and previous iteration; ``C_km1`` is the model the latest
    gradients were evaluated at.  ``grad_km2 = None`` (first iteration)
    drops the step-through term, leaving the exact fixed-model partial
    derivative.  Timepoints without a segment get a zero column.
    """
    n_s, n_t = S_km1.values.shape
    if C_km1.n_signals != n_s:
        raise GeometryError(f"{n_s} signals vs {C_km1.n_signals} correspondence grids")
    shape = C_km1.lattice.disp.shape
    h = np.zeros((n_s, n_t), dtype=np.float64)
    flat_c = [g.disp.ravel() for g in C_km1.grids]
    for t, g1 in grad_km1.items():
        if g1.shape != shape:
            raise GeometryError(f"gradient at t={t} has shape {g1.shape}, expected {shape}")
        g1 = g1.ravel()
        for i in range(n_s):
            h[i, t] = np.dot(flat_c[i], g1)
        if grad_km2 is not None and lambda_km1 != 0.0:
            g2 = grad_km2.get(t)
            if g2 is None:
                continue
            if g2.shape != shape:
                raise GeometryError(f"cached gradient at t={t} has shape {g2.shape}")
            cross = float(np.dot(g2.ravel(), g1))
            h[:, t] -= lambda_km1 * S_km1.values[:, t] * cross
    return HyperGradient(h)


def update_surrogates(S: SurrogateMatrix, h: HyperGradient, alpha: float) -> SurrogateMatrix:
    """Element-wise signal update ``S - alpha * h``."""
    if S.values.shape != h.values.shape:
        raise GeometryError(
            f"signal shape {S.values.shape} vs hypergradient {h.values.shape}"
        )
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    out = S.values - alpha * h.values
    if not np.all(np.isfinite(out)):
        raise NumericalError("surrogate update produced non-finite signals")
    return SurrogateMatrix(out)


def init_surrogates_phase(phases, n_phases: int = 10) -> SurrogateMatrix:
    """Cosine/sine signals derived from respiration phase labels.

    Used when no measured respiration signal exists; ``phases`` are
    (possibly fractional) labels in ``[0, n_phases)``.
    """
    p = np.asarray(phases, dtype=np.float64)
    if p.size == 0:
        raise ValueError("phase sequence is empty")
    if n_phases < 2:
        raise ValueError("need at least 2 phases")
    ang = 2.0 * np.pi * p / float(n_phases)
    return SurrogateMatrix(np.stack((np.cos(ang), np.sin(ang))))


def temporal_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    """Central-difference derivative per second, one-sided at the ends."""
    v = np.asarray(values, dtype=np.float64)
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (2.0 * dt)
    d[0] = (v[1] - v[0]) / dt
    d[-1] = (v[-1] - v[-2]) / dt
    return d


def init_surrogates_signal(signal: RespTrace) -> SurrogateMatrix:
    """Measured respiration trace plus its temporal derivative, both
    standardised to unit variance (the derivative supplies the second
    degree of freedom needed for hysteresis)."""
    if len(signal.values) < 3:
        raise ValueError("signal must have at least 3 samples")
    rows = np.stack((signal.values, temporal_derivative(signal.values, signal.dt)))
    S, _ = normalize_surrogates(SurrogateMatrix(rows), None)
    return S


def normalize_surrogates(S: SurrogateMatrix, C: MotionModel | None):
    """Rescale each signal row to unit standard deviation, multiplying the
    matching correspondence grid by the inverse factor so every composed
    transform is preserved.

    Zero-variance rows are left untouched and flagged with
    :class:`DegenerateSignalWarning`.  Returns ``(S', C')``; ``C`` may be
    None (e.g. before any model exists), in which case only the signals
    are rescaled.
    """
    vals = S.values.copy()
    grids = None if C is None else [g.copy() for g in C.grids]
    if C is not None and C.n_signals != S.n_signals:
        raise GeometryError(f"{S.n_signals} signals vs {C.n_signals} correspondence grids")
    for i in range(vals.shape[0]):
        sd = float(vals[i].std())
        if sd < EPS_STD:
            warnings.warn(
                f"signal row {i + 1} has zero variance; left unscaled",
                DegenerateSignalWarning,
                stacklevel=2,
            )
            continue
        vals[i] /= sd
        if grids is not None:
            grids[i].disp *= sd
    S_out = SurrogateMatrix(vals)
    return S_out, (None if grids is None else MotionModel(grids))
