"""Three-level coarse-to-fine alternation of motion-model fitting and
motion-compensated reconstruction, with optional surrogate-signal
optimisation interleaved into the fit.

Modes
-----
``driven``     provided signals stay frozen (signal step size forced to 0)
``optimized``  provided signals are refined by hypergradient steps
``free``       no signals required; cosine/sine of the phase labels seed
               the optimisation

Every stage minimises the one shared objective, so the recorded trace is
non-increasing within a level: model and reconstruction steps backtrack
until they do not increase it, and signal steps are safeguarded the same
way (the published fixed step size is used when it already is safe,
otherwise it is shrunk, because the raw hypergradient scale depends on
image size and signal normalisation).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bspline, hypergrad, mcir, surrmodel
from .bspline import ControlGrid, refit_control_grid
from .errors import ConfigurationError, FormatError
from .hypergrad import compute_hypergradient, init_surrogates_phase, normalize_surrogates
from .mcir import coverage_weights, stack_segments
from .surrmodel import FitState, MotionModel, SurrogateMatrix, compose_motion, fit_step, objective
from .volgrid import Grid3, Mask, Segment, Volume, downsample, resample_to

MODES = ("driven", "free", "optimized")
SURROGATE_UPDATE = ("per_iteration", "per_run")

# Safeguard for signal steps: cap the largest per-entry change at this
# fraction of the largest signal standard deviation, then backtrack.
SURROGATE_STEP_CAP = 0.25
SURROGATE_MAX_BACKTRACKS = 8


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "optimized"
    levels: tuple = ((4, 4, 2), (2, 2, 1), (1, 1, 1))
    max_alternations: int = 6
    max_inner_iters: int = 5
    alpha: float = 0.01
    tol_f: float = 1e-4
    seed: int = 0
    surrogate_update: str = "per_iteration"
    knot_spacing_voxels: float = 4.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.surrogate_update not in SURROGATE_UPDATE:
            raise ConfigurationError(
                f"surrogate_update must be one of {SURROGATE_UPDATE}"
            )
        levels = tuple(tuple(int(f) for f in lv) for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels or any(len(lv) != 3 or min(lv) < 1 for lv in levels):
            raise ConfigurationError("levels must be non-empty integer triples >= 1")
        for a, b in zip(levels, levels[1:]):
            if any(fb > fa for fa, fb in zip(a, b)):
                raise ConfigurationError("levels must be ordered coarse to fine")
        if self.max_alternations < 1 or self.max_inner_iters < 1:
            raise ConfigurationError("iteration caps must be >= 1")
        if self.alpha < 0 or self.tol_f <= 0 or self.knot_spacing_voxels <= 0:
            raise ConfigurationError("alpha must be >= 0; tolerances positive")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "levels": [list(lv) for lv in self.levels],
            "max_alternations": self.max_alternations,
            "max_inner_iters": self.max_inner_iters,
            "alpha": self.alpha,
            "tol_f": self.tol_f,
            "seed": self.seed,
            "surrogate_update": self.surrogate_update,
            "knot_spacing_voxels": self.knot_spacing_voxels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {
            "mode", "levels", "max_alternations", "max_inner_iters",
            "alpha", "tol_f", "seed", "surrogate_update", "knot_spacing_voxels",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "levels" in kwargs:
            kwargs["levels"] = tuple(tuple(lv) for lv in kwargs["levels"])
        return cls(**kwargs)


@dataclass
class PipelineResult:
    """Everything the method estimates, plus the objective log."""

    i0: Volume
    model: MotionModel
    signals: SurrogateMatrix
    traces: list
    coverage: Mask
    config: PipelineConfig

    def compose(self, t: int) -> ControlGrid:
        return compose_motion(self.signals, self.model, t)


def _trace_row(level, alternation, stage, iteration, objective_value, step, alpha, S):
    stds = ";".join(repr(float(s)) for s in S.values.std(axis=1))
    return {
        "level": level,
        "alternation": alternation,
        "stage": stage,
        "iteration": iteration,
        "objective": float(objective_value),
        "step": float(step),
        "alpha": float(alpha),
        "signal_stds": stds,
    }


def _downsample_grid(grid: Grid3, factor) -> Grid3:
    fx, fy, fz = factor
    dims = tuple(-(-d // f) for d, f in zip(grid.dims, (fx, fy, fz)))
    spacing = tuple(s * f for s, f in zip(grid.spacing, (fx, fy, fz)))
    origin = tuple(o + 0.5 * (f - 1) * s for o, s, f in zip(grid.origin, grid.spacing, (fx, fy, fz)))
    return Grid3(dims, spacing, origin)


def _downsample_segment(seg: Segment, factor, grid_coarse: Grid3) -> Segment:
    """Block-average a slab consistently with volume downsampling; the
    slab's z blocks follow the global block boundaries."""
    fx, fy, fz = factor
    vals = seg.values.astype(np.float64)
    from .volgrid import _block_mean

    vals = _block_mean(vals, fy, axis=1)
    vals = _block_mean(vals, fx, axis=2)
    z_lo = seg.z_lo // fz
    z_hi = seg.z_hi // fz
    if fz > 1:
        # group source slices by their coarse block
        blocks = (np.arange(seg.z_lo, seg.z_hi + 1) // fz) - z_lo
        out = np.zeros((z_hi - z_lo + 1,) + vals.shape[1:], dtype=np.float64)
        counts = np.bincount(blocks, minlength=z_hi - z_lo + 1).astype(np.float64)
        np.add.at(out, blocks, vals)
        vals = out / counts[:, None, None]
    return Segment(grid_coarse, z_lo, z_hi, seg.t, vals)


def _surrogate_step(
    i0: Volume,
    S: SurrogateMatrix,
    C_new: MotionModel,
    segs: Sequence[Segment],
    C_before: MotionModel,
    grads_km2,
    lam_km1: float,
    state: FitState,
    alpha: float,
    f_cur: float,
):
    """Safeguarded hypergradient update of the signals.

    Applies ``S - a*h`` with the largest ``a <= alpha`` (also capped so no
    entry moves more than a fraction of the signal spread) that does not
    increase the objective; rejected entirely when none does.
    Returns ``(S', f', a_eff)``.
    """
    h = compute_hypergradient(C_before, grads_km2, state.grads_prev, S, lam_km1)
    hmax = float(np.abs(h.values).max())
    if hmax == 0.0:
        return S, f_cur, 0.0
    spread = float(S.values.std(axis=1).max())
    if spread <= 0.0:
        spread = max(float(np.abs(S.values).max()), 1.0)
    a0 = min(alpha, SURROGATE_STEP_CAP * spread / hmax)
    for m in range(SURROGATE_MAX_BACKTRACKS + 1):
        a = a0 * 0.5**m
        S_try = SurrogateMatrix(S.values - a * h.values)
        f_try = objective(i0, S_try, C_new, segs)
        if f_try <= f_cur:
            return S_try, f_try, a
    return S, f_cur, 0.0


def run_pipeline(
    cfg: PipelineConfig,
    segs: Sequence[Segment],
    signals: SurrogateMatrix | None = None,
    phases=None,
    init_i0: Volume | None = None,
) -> PipelineResult:
    """Run the full method and return the estimated reference volume,
    motion model, signals, objective traces and coverage mask.

    ``driven``/``optimized`` modes require ``signals``; ``free`` requires
    ``phases``.  ``init_i0`` (typically the average of the sorted phase
    volumes) defaults to a weight-normalised stack of the raw segments.
    """
    if not segs:
        raise ConfigurationError("no segments provided")
    grid = segs[0].parent_grid
    for s in segs:
        if s.parent_grid != grid:
            raise ConfigurationError("segments live on different grids")

    if cfg.mode in ("driven", "optimized"):
        if signals is None:
            raise ConfigurationError(f"mode {cfg.mode!r} requires surrogate signals")
        S = signals.copy()
    else:
        if phases is None:
            raise ConfigurationError("mode 'free' requires phase labels")
        S = init_surrogates_phase(phases)
    n_times = S.n_times
    if any(s.t >= n_times for s in segs):
        raise ConfigurationError("segment timepoint beyond the signal length")

    # Frozen signals are exactly the optimised path with a zero step size.
    alpha = 0.0 if cfg.mode == "driven" else cfg.alpha
    optimizing = alpha > 0.0

    if init_i0 is None:
        init_i0, _ = stack_segments(segs, grid)
    elif init_i0.grid != grid:
        raise ConfigurationError("init_i0 does not live on the segment grid")

    i0 = None
    C = None
    traces: list = []
    for level, factor in enumerate(cfg.levels):
        level_grid = _downsample_grid(grid, factor) if max(factor) > 1 else grid
        segs_l = [
            _downsample_segment(s, factor, level_grid) if max(factor) > 1 else s
            for s in segs
        ]
        cspacing = tuple(cfg.knot_spacing_voxels * sp for sp in level_grid.spacing)
        if i0 is None:
            i0 = downsample(init_i0, factor) if max(factor) > 1 else init_i0.copy()
            C = MotionModel.zeros(ControlGrid.create(level_grid, cspacing), S.n_signals)
        else:
            i0 = resample_to(i0, level_grid)
            C = MotionModel(
                [refit_control_grid(g, level_grid, cspacing) for g in C.grids]
            )
        S, C = normalize_surrogates(S, C)

        f_cur = objective(i0, S, C, segs_l)
        traces.append(_trace_row(level, 0, "init", 0, f_cur, 0.0, 0.0, S))

        for alternation in range(1, cfg.max_alternations + 1):
            f_start = f_cur
            snapshot = (i0, S, C)

            # -- model fit (+ optional signal steps) -------------------------
            state = FitState()
            f_iter_prev = f_cur
            for it in range(1, cfg.max_inner_iters + 1):
                lam_km1 = state.step_prev
                grads_km2 = state.grads_prev
                C_before = C
                C, state = fit_step(state, i0, S, C, segs_l)
                f_cur = state.history[-1]
                traces.append(
                    _trace_row(level, alternation, "fit", it, f_cur, state.step_prev, 0.0, S)
                )
                a_eff = 0.0
                if optimizing and cfg.surrogate_update == "per_iteration":
                    S, f_cur, a_eff = _surrogate_step(
                        i0, S, C, segs_l, C_before, grads_km2, lam_km1, state, alpha, f_cur
                    )
                    if a_eff > 0.0:
                        traces.append(
                            _trace_row(level, alternation, "surr", it, f_cur, 0.0, a_eff, S)
                        )
                if state.step_prev == 0.0 and a_eff == 0.0:
                    break
                if f_iter_prev - f_cur < cfg.tol_f * max(abs(f_iter_prev), 1e-30):
                    break
                f_iter_prev = f_cur
            if optimizing and cfg.surrogate_update == "per_run" and state.grads_prev is not None:
                S, f_cur, a_eff = _surrogate_step(
                    i0, S, C, segs_l, C_before, grads_km2, lam_km1, state, alpha, f_cur
                )
                if a_eff > 0.0:
                    traces.append(
                        _trace_row(level, alternation, "surr", 0, f_cur, 0.0, a_eff, S)
                    )

            # -- reconstruction ----------------------------------------------
            def _log_mcir(rstate, level=level, alternation=alternation):
                traces.append(
                    _trace_row(
                        level, alternation, "mcir", rstate.iteration,
                        rstate.history[-1], rstate.step_prev, 0.0, S,
                    )
                )

            i0, rstate = mcir.mcir_run(
                i0, S, C, segs_l, cfg.max_inner_iters, cfg.tol_f, callback=_log_mcir
            )
            f_cur = rstate.history[-1]

            if f_cur > f_start:
                # should not happen (all steps are safeguarded); keep the
                # previous alternation's state and stop this level
                i0, S, C = snapshot
                f_cur = f_start
                break
            traces.append(_trace_row(level, alternation, "alt_end", 0, f_cur, 0.0, 0.0, S))
            if f_start - f_cur < cfg.tol_f * max(abs(f_start), 1e-30):
                break

    coverage = Mask(grid, (coverage_weights(S, C, segs) > 0).astype(np.uint8))
    return PipelineResult(i0=i0, model=C, signals=S, traces=traces, coverage=coverage, config=cfg)


def export_frames(result: PipelineResult, timepoints: Sequence[int]) -> list[Volume]:
    """Estimated real-time volumes: the reference warped by each composed
    per-timepoint transform."""
    frames = []
    for t in timepoints:
        frames.append(bspline.warp_volume(result.i0, result.compose(int(t))))
    return frames


def find_extreme_inhalation(
    S: SurrogateMatrix,
    phase_labels,
    inhale_phase: int = 5,
    model: MotionModel | None = None,
) -> tuple[int, int]:
    """Deepest and shallowest end-inhalation timepoints.

    Candidates carry the end-inhalation phase bin; depth ranks by the
    first signal, sign-oriented (when ``model`` is given) so that larger
    values mean larger superior-inferior displacement.
    """
    labels = np.asarray(phase_labels, dtype=np.float64)
    cands = [t for t in range(min(S.n_times, labels.size)) if int(labels[t]) == inhale_phase]
    if not cands:
        raise ValueError(f"no timepoints labeled with phase {inhale_phase}")
    s1 = S.values[0, cands].copy()
    if model is not None and len(cands) > 1 and s1.std() > 0:
        depth = np.array(
            [np.abs(compose_motion(S, model, t).disp[..., 2]).mean() for t in cands]
        )
        if depth.std() > 0 and np.corrcoef(s1, depth)[0, 1] < 0:
            s1 = -s1
    t_deep = cands[int(np.argmax(s1))]
    t_shallow = cands[int(np.argmin(s1))]
    return t_deep, t_shallow


# ---------------------------------------------------------------------------
# Result directory layout
# ---------------------------------------------------------------------------

TRACE_FIELDS = ("level", "alternation", "stage", "iteration", "objective", "step", "alpha", "signal_stds")


def save_result(result: PipelineResult, outdir: str | Path) -> None:
    """Write ``i0``, per-signal models, signals, trace log and coverage."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    from .volgrid import write_mask, write_volume

    write_volume(result.i0, outdir / "i0.json")
    result.signals.to_csv(outdir / "signals.csv")
    for i, g in enumerate(result.model.grids, start=1):
        bspline.write_control_grid(g, outdir / f"model_{i}.json")
    write_mask(result.coverage, outdir / "coverage.json")
    with open(outdir / "trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_FIELDS)
        for row in result.traces:
            w.writerow([row[k] if k != "objective" else repr(row[k]) for k in TRACE_FIELDS])
    (outdir / "config.json").write_text(
        json.dumps(result.config.to_json(), indent=2, sort_keys=True) + "\n"
    )


def load_result(outdir: str | Path) -> PipelineResult:
    outdir = Path(outdir)
    from .volgrid import read_mask, read_volume

    try:
        config = PipelineConfig.from_json(json.loads((outdir / "config.json").read_text()))
    except OSError as e:
        raise FormatError(f"{outdir}: missing config.json: {e}") from e
    i0 = read_volume(outdir / "i0.json")
    signals = SurrogateMatrix.from_csv(outdir / "signals.csv")
    grids = []
    for i in range(1, signals.n_signals + 1):
        grids.append(bspline.read_control_grid(outdir / f"model_{i}.json"))
    coverage = read_mask(outdir / "coverage.json")
    traces = []
    with open(outdir / "trace.csv", newline="") as f:
        for row in csv.DictReader(f):
            traces.append(
                {
                    "level": int(row["level"]),
                    "alternation": int(row["alternation"]),
                    "stage": row["stage"],
                    "iteration": int(row["iteration"]),
                    "objective": float(row["objective"]),
                    "step": float(row["step"]),
                    "alpha": float(row["alpha"]),
                    "signal_stds": row["signal_stds"],
                }
            )
    return PipelineResult(
        i0=i0,
        model=MotionModel(grids),
        signals=signals,
        traces=traces,
        coverage=coverage,
        config=config,
    )
