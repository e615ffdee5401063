"""Ground-truth digital breathing phantom and cine 4DCT acquisition.

The anatomy is analytic (elliptical torso, two lungs cut by a diaphragm
dome, a spine rod and a spherical tumor).  Motion is a two-mode model
built the same way the fitting model is parameterised: a chest-driven
anterior-posterior field and a diaphragm-driven superior-inferior field,
each sampled onto the finest fitting knot lattice so the ground truth
lies exactly in the span of the fitted model.  Delaying the diaphragm
trace gives inhale/exhale hysteresis.

Acquisition walks a couch schedule over the slices, extracting one slab
per timepoint from the warped anatomy; phase sorting of those slabs
reproduces the classic irregular-breathing stack artifacts.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bspline
from .bspline import ControlGrid
from .errors import FormatError, ScheduleError, SortingGapWarning
from .volgrid import Grid3, Mask, Segment, Volume, extract_segment

HU_AIR = -1000.0
HU_LUNG = -800.0
HU_SOFT = 40.0
HU_BONE = 700.0
HU_TUMOR = 60.0

# Spatial envelopes of the two ground-truth motion modes (mm).
SI_SIGMA_X = 55.0
SI_SIGMA_Y = 45.0
SI_TAPER_HALFWIDTH = 70.0
AP_SIGMA_X = 65.0
AP_SIGMA_Y = 30.0
AP_TAPER_HALFWIDTH = 80.0


@dataclass
class RespTrace:
    """A sampled respiration signal (arbitrary amplitude units)."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("trace must be non-empty and finite")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive")
        self.values = v
        self.dt = float(self.dt)

    def __len__(self) -> int:
        return self.values.size

    def sample_at(self, t_seconds: float) -> float:
        """Linear interpolation, clamped at both ends."""
        times = self.dt * np.arange(self.values.size)
        return float(np.interp(t_seconds, times, self.values))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_seconds", "value"])
            for k, v in enumerate(self.values):
                w.writerow([repr(k * self.dt), repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RespTrace":
        try:
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise FormatError(f"{path}: {e}") from e
        if len(rows) < 3 or rows[0] != ["t_seconds", "value"]:
            raise FormatError(f"{path}: expected 't_seconds,value' with >= 2 samples")
        try:
            times = np.array([float(r[0]) for r in rows[1:]])
            vals = np.array([float(r[1]) for r in rows[1:]])
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: {e}") from e
        dts = np.diff(times)
        if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
            raise FormatError(f"{path}: samples are not uniformly spaced")
        return cls(vals, float(dts[0]))


def make_breathing(
    seed: int,
    n: int,
    dt: float,
    base_period: float = 4.0,
    amplitude_jitter: float = 0.0,
    period_jitter: float = 0.0,
):
    """Concatenated raised-cosine breath cycles with seeded per-cycle
    amplitude/period jitter.

    Returns ``(trace, phase)`` where ``phase`` holds the fractional
    respiration phase in [0, 10) of each sample (0 = start of a cycle,
    5 = peak inhalation), known exactly from the cycle construction.
    """
    if amplitude_jitter < 0 or period_jitter < 0:
        raise ValueError("jitters must be >= 0")
    rng = np.random.default_rng(seed)
    total = n * dt
    starts = [0.0]
    periods = []
    amps = []
    while starts[-1] < total:
        periods.append(base_period * (1.0 + period_jitter * rng.uniform(-1.0, 1.0)))
        amps.append(1.0 + amplitude_jitter * rng.uniform(-1.0, 1.0))
        starts.append(starts[-1] + periods[-1])
    starts = np.asarray(starts)
    t = dt * np.arange(n)
    cyc = np.searchsorted(starts, t, side="right") - 1
    frac = (t - starts[cyc]) / np.asarray(periods)[cyc]
    values = np.asarray(amps)[cyc] * 0.5 * (1.0 - np.cos(2.0 * np.pi * frac))
    return RespTrace(values, dt), 10.0 * frac


def make_irregular_trace(
    seed: int,
    n: int,
    dt: float,
    base_period: float = 4.0,
    amplitude_jitter: float = 0.0,
    period_jitter: float = 0.0,
) -> RespTrace:
    """Seed-deterministic breathing trace (see :func:`make_breathing`)."""
    return make_breathing(seed, n, dt, base_period, amplitude_jitter, period_jitter)[0]


# ---------------------------------------------------------------------------
# Acquisition schedule
# ---------------------------------------------------------------------------


@dataclass
class AcquisitionSchedule:
    """Per-timepoint couch position, slab range, time and phase label."""

    couch: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    time_s: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.couch = np.asarray(self.couch, dtype=np.int64)
        self.z_lo = np.asarray(self.z_lo, dtype=np.int64)
        self.z_hi = np.asarray(self.z_hi, dtype=np.int64)
        self.time_s = np.asarray(self.time_s, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        n = self.couch.size
        if any(a.size != n for a in (self.z_lo, self.z_hi, self.time_s, self.phase)):
            raise ValueError("schedule columns must have equal length")
        if np.any(self.z_lo > self.z_hi):
            raise ValueError("z_lo must be <= z_hi")
        if np.any(self.phase < 0) or np.any(self.phase >= 10):
            raise ValueError("phase labels must lie in [0, 10)")

    def __len__(self) -> int:
        return self.couch.size

    def check_tiles(self, nz: int) -> None:
        covered = np.zeros(nz, dtype=bool)
        if np.any(self.z_hi >= nz):
            raise ScheduleError(f"slab reaches slice {int(self.z_hi.max())} >= nz={nz}")
        for lo, hi in zip(self.z_lo, self.z_hi):
            covered[lo : hi + 1] = True
        if not covered.all():
            missing = np.flatnonzero(~covered)
            raise ScheduleError(f"schedule leaves slices uncovered: {missing.tolist()}")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "couch", "z_lo", "z_hi", "phase"])
            for t in range(len(self)):
                w.writerow(
                    [t, int(self.couch[t]), int(self.z_lo[t]), int(self.z_hi[t]), repr(float(self.phase[t]))]
                )

    @classmethod
    def from_csv(cls, path: str | Path, dt: float) -> "AcquisitionSchedule":
        try:
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise FormatError(f"{path}: {e}") from e
        if not rows or rows[0] != ["t", "couch", "z_lo", "z_hi", "phase"]:
            raise FormatError(f"{path}: expected header 't,couch,z_lo,z_hi,phase'")
        try:
            body = [[float(x) for x in r] for r in rows[1:]]
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from e
        if not body:
            raise FormatError(f"{path}: empty schedule")
        arr = np.asarray(body)
        return cls(arr[:, 1], arr[:, 2], arr[:, 3], dt * arr[:, 0], arr[:, 4])


def build_schedule(
    phase: np.ndarray,
    dt: float,
    nz: int,
    n_couch: int,
    slices_per_couch: int | None = None,
) -> AcquisitionSchedule:
    """Walk the couch once over the volume, dwelling evenly at each
    position; timepoints are split evenly across couch positions."""
    n = len(phase)
    if n % n_couch:
        raise ValueError(f"{n} timepoints do not split over {n_couch} couch positions")
    if slices_per_couch is None:
        if nz % n_couch:
            raise ValueError(f"{nz} slices do not tile over {n_couch} couch positions")
        slices_per_couch = nz // n_couch
    dwell = n // n_couch
    couch = np.repeat(np.arange(n_couch), dwell)
    z_lo = couch * slices_per_couch
    z_hi = z_lo + slices_per_couch - 1
    return AcquisitionSchedule(couch, z_lo, z_hi, dt * np.arange(n), np.asarray(phase))


# ---------------------------------------------------------------------------
# Phantom specification and template anatomy
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Anatomy, ground-truth motion and traces of the digital phantom.

    All anatomy coordinates are mm relative to the grid centre, which
    keeps a symmetric parameter set exactly mirror-symmetric in x.
    """

    grid: Grid3
    chest: RespTrace
    diaphragm: RespTrace
    delay_s: float = 1.0
    # anatomy
    torso_rx: float = 80.0
    torso_ry: float = 62.0
    spine_y: float = 42.0
    spine_r: float = 9.0
    lung_dx: float = 40.0
    lung_dy: float = -8.0
    lung_dz: float = 18.0
    lung_rx: float = 28.0
    lung_ry: float = 36.0
    lung_rz: float = 50.0
    dome_apex_z: float = -16.5
    dome_height: float = 10.0
    tumor_center: tuple[float, float, float] = (40.0, -8.0, -4.5)
    tumor_radius: float = 9.0
    # ground-truth motion amplitudes (mm at the envelope peak, per unit trace)
    amp_ap: float = 6.0
    amp_si: float = 12.0
    # provenance of generated traces (None when traces came from files)
    trace_params: dict | None = None

    def __post_init__(self):
        if self.delay_s < 0:
            raise ValueError("diaphragm delay must be >= 0")
        if self.tumor_radius > 0 and self.tumor_radius < 2.0 * max(self.grid.spacing):
            raise ValueError("tumor radius must span at least 2 voxels")
        half = self._half_extent()
        for c, h in zip(self.tumor_center, half):
            if abs(c) + self.tumor_radius > h + 1e-9:
                raise ValueError("tumor leaves the imaged grid")
        self._template_cache = None
        self._gt_cache = None

    def _half_extent(self) -> tuple[float, float, float]:
        return tuple(
            0.5 * (self.grid.dims[a] - 1) * self.grid.spacing[a] for a in range(3)
        )

    def _axes(self):
        """Centred voxel coordinates (mm) broadcastable to (nz, ny, nx)."""
        out = []
        for a in range(3):
            n, s = self.grid.dims[a], self.grid.spacing[a]
            out.append((np.arange(n, dtype=np.float64) - 0.5 * (n - 1)) * s)
        x, y, z = out
        return x[None, None, :], y[None, :, None], z[:, None, None]

    # -- template ----------------------------------------------------------

    def template(self) -> Volume:
        if self._template_cache is None:
            self._template_cache = build_template(self)
        return self._template_cache[0]

    def tumor_mask(self) -> Mask:
        if self._template_cache is None:
            self._template_cache = build_template(self)
        return self._template_cache[1]

    def tumor_center_world(self) -> np.ndarray:
        centre = [
            self.grid.origin[a] + 0.5 * (self.grid.dims[a] - 1) * self.grid.spacing[a]
            for a in range(3)
        ]
        return np.asarray(centre) + np.asarray(self.tumor_center)

    # -- ground-truth motion -----------------------------------------------

    def gt_grids(self) -> tuple[ControlGrid, ControlGrid]:
        """Chest (AP) and diaphragm (SI) correspondence grids on the finest
        fitting lattice (4 voxels per knot)."""
        if self._gt_cache is None:
            csp = tuple(4.0 * s for s in self.grid.spacing)
            lattice = ControlGrid.create(self.grid, csp)
            kx, ky, kz = _knot_coords_centered(lattice, self.grid)
            c1 = lattice.with_disp(_ap_field(self, kx, ky, kz))
            c2 = lattice.with_disp(_si_field(self, kx, ky, kz))
            self._gt_cache = (c1, c2)
        return self._gt_cache

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        keys = (
            "delay_s",
            "torso_rx", "torso_ry", "spine_y", "spine_r",
            "lung_dx", "lung_dy", "lung_dz", "lung_rx", "lung_ry", "lung_rz",
            "dome_apex_z", "dome_height", "tumor_radius",
            "amp_ap", "amp_si",
        )
        obj = {k: getattr(self, k) for k in keys}
        obj["grid"] = self.grid.to_json()
        obj["tumor_center"] = list(self.tumor_center)
        obj["trace_params"] = self.trace_params
        return obj

    @classmethod
    def from_json(cls, obj: dict, chest: RespTrace | None = None, diaphragm: RespTrace | None = None) -> "PhantomSpec":
        try:
            grid = Grid3.from_json(obj["grid"])
            params = obj.get("trace_params")
            if chest is None or diaphragm is None:
                if params is None:
                    raise FormatError("phantom spec carries no traces and no trace parameters")
                trace = make_irregular_trace(
                    int(params["seed"]),
                    int(params["n"]),
                    float(params["dt"]),
                    float(params["base_period"]),
                    float(params["amplitude_jitter"]),
                    float(params["period_jitter"]),
                )
                chest = chest or trace
                diaphragm = diaphragm or RespTrace(trace.values.copy(), trace.dt)
            kwargs = {
                k: obj[k]
                for k in (
                    "delay_s",
                    "torso_rx", "torso_ry", "spine_y", "spine_r",
                    "lung_dx", "lung_dy", "lung_dz", "lung_rx", "lung_ry", "lung_rz",
                    "dome_apex_z", "dome_height", "tumor_radius",
                    "amp_ap", "amp_si",
                )
            }
            kwargs["tumor_center"] = tuple(obj["tumor_center"])
            kwargs["trace_params"] = params
            return cls(grid, chest, diaphragm, **kwargs)
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"bad phantom spec: {e}") from e


def default_spec(
    seed: int = 0,
    n_times: int = 120,
    dt: float = 0.4,
    base_period: float = 4.0,
    amplitude_jitter: float = 0.35,
    period_jitter: float = 0.15,
    dims: tuple[int, int, int] = (96, 80, 48),
    spacing: tuple[float, float, float] = (2.0, 2.0, 3.0),
    delay_s: float = 1.0,
    **overrides,
) -> PhantomSpec:
    """Desk-scale phantom driven by a seeded irregular breathing trace."""
    trace = make_irregular_trace(seed, n_times, dt, base_period, amplitude_jitter, period_jitter)
    params = {
        "seed": seed,
        "n": n_times,
        "dt": dt,
        "base_period": base_period,
        "amplitude_jitter": amplitude_jitter,
        "period_jitter": period_jitter,
    }
    return PhantomSpec(
        Grid3(dims, spacing),
        chest=trace,
        diaphragm=RespTrace(trace.values.copy(), trace.dt),
        delay_s=delay_s,
        trace_params=params,
        **overrides,
    )


def default_schedule(spec: PhantomSpec, n_couch: int = 8) -> AcquisitionSchedule:
    if spec.trace_params is None:
        raise ValueError("spec has no trace parameters; build the schedule explicitly")
    p = spec.trace_params
    _, phase = make_breathing(
        int(p["seed"]), int(p["n"]), float(p["dt"]),
        float(p["base_period"]), float(p["amplitude_jitter"]), float(p["period_jitter"]),
    )
    return build_schedule(phase, float(p["dt"]), spec.grid.dims[2], n_couch)


def build_template(spec: PhantomSpec) -> tuple[Volume, Mask]:
    """Piecewise-constant HU anatomy plus the tumor mask."""
    x, y, z = spec._axes()
    vol = np.full(spec.grid.shape_zyx, HU_AIR, dtype=np.float64)

    if spec.torso_rx <= 0 or spec.torso_ry <= 0:
        raise ValueError("torso semi-axes must be positive")
    shape = spec.grid.shape_zyx
    torso = np.broadcast_to(
        (x / spec.torso_rx) ** 2 + (y / spec.torso_ry) ** 2 <= 1.0, shape
    )
    vol[torso] = HU_SOFT

    if spec.spine_r > 0:
        spine = torso & np.broadcast_to(
            x**2 + (y - spec.spine_y) ** 2 <= spec.spine_r**2, shape
        )
        vol[spine] = HU_BONE

    if spec.lung_rx > 0 and spec.lung_ry > 0 and spec.lung_rz > 0:
        dome = spec.dome_apex_z - spec.dome_height * (
            ((np.abs(x) - spec.lung_dx) ** 2 + (y - spec.lung_dy) ** 2)
            / max(spec.lung_rx, 1e-9) ** 2
        )
        for sign in (-1.0, 1.0):
            lung = (
                ((x - sign * spec.lung_dx) / spec.lung_rx) ** 2
                + ((y - spec.lung_dy) / spec.lung_ry) ** 2
                + ((z - spec.lung_dz) / spec.lung_rz) ** 2
            ) <= 1.0
            vol[lung & (z > dome) & torso] = HU_LUNG

    tumor = np.zeros(spec.grid.shape_zyx, dtype=bool)
    if spec.tumor_radius > 0:
        cx, cy, cz = spec.tumor_center
        tumor = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= spec.tumor_radius**2
        vol[tumor] = HU_TUMOR

    return Volume(spec.grid, vol), Mask(spec.grid, tumor.astype(np.uint8))


def _knot_coords_centered(lattice: ControlGrid, grid: Grid3):
    """Knot positions in the same centred mm frame the anatomy uses."""
    out = []
    for a in range(3):
        centre = grid.origin[a] + 0.5 * (grid.dims[a] - 1) * grid.spacing[a]
        world = lattice.origin[a] + lattice.cspacing[a] * np.arange(lattice.cdims[a])
        out.append(world - centre)
    x, y, z = out
    return x[None, None, :], y[None, :, None], z[:, None, None]


def _cos_taper(z: np.ndarray, centre: float, halfwidth: float) -> np.ndarray:
    arg = (z - centre) / halfwidth
    w = np.cos(0.5 * np.pi * np.clip(np.abs(arg), 0.0, 1.0))
    return w * w


def _si_field(spec: PhantomSpec, x, y, z) -> np.ndarray:
    """Superior-inferior bump centred on the diaphragm."""
    g = (
        np.exp(-(x**2) / (2.0 * SI_SIGMA_X**2) - (y - spec.lung_dy) ** 2 / (2.0 * SI_SIGMA_Y**2))
        * _cos_taper(z, spec.dome_apex_z, SI_TAPER_HALFWIDTH)
    )
    shape = np.broadcast_shapes(x.shape, y.shape, z.shape)
    disp = np.zeros(shape + (3,), dtype=np.float64)
    disp[..., 2] = spec.amp_si * np.broadcast_to(g, shape)
    return disp


def _ap_field(spec: PhantomSpec, x, y, z) -> np.ndarray:
    """Anterior-posterior bump at the chest wall."""
    y_wall = -spec.torso_ry
    g = (
        np.exp(-(x**2) / (2.0 * AP_SIGMA_X**2) - (y - y_wall) ** 2 / (2.0 * AP_SIGMA_Y**2))
        * _cos_taper(z, 0.0, AP_TAPER_HALFWIDTH)
    )
    shape = np.broadcast_shapes(x.shape, y.shape, z.shape)
    disp = np.zeros(shape + (3,), dtype=np.float64)
    disp[..., 1] = spec.amp_ap * np.broadcast_to(g, shape)
    return disp


# ---------------------------------------------------------------------------
# Ground-truth motion and simulated acquisition
# ---------------------------------------------------------------------------


def gt_motion(spec: PhantomSpec, t: int) -> ControlGrid:
    """Ground-truth transform at timepoint ``t``: chest-trace-weighted AP
    grid plus delayed-diaphragm-trace-weighted SI grid."""
    if not (0 <= t < len(spec.chest)):
        raise IndexError(f"timepoint {t} outside [0, {len(spec.chest)})")
    c1, c2 = spec.gt_grids()
    chest_val = float(spec.chest.values[t])
    dia_val = spec.diaphragm.sample_at(t * spec.chest.dt - spec.delay_s)
    return c1.with_disp(chest_val * c1.disp + dia_val * c2.disp)


def gt_frame(spec: PhantomSpec, t: int) -> Volume:
    """The full dynamic volume at timepoint ``t``."""
    return bspline.warp_volume(spec.template(), gt_motion(spec, t))


def gt_tumor_mask(spec: PhantomSpec, t: int) -> Mask:
    """Tumor mask at timepoint ``t`` (trilinear warp, 0.5 threshold)."""
    m = spec.tumor_mask()
    vol = Volume(spec.grid, m.values.astype(np.float32))
    warped = bspline.warp_volume(vol, gt_motion(spec, t), fill=0.0)
    return Mask(spec.grid, (warped.values > 0.5).astype(np.uint8))


def simulate_acquisition(
    spec: PhantomSpec,
    schedule: AcquisitionSchedule,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
):
    """Warp-then-extract one segment per scheduled timepoint.

    Returns ``(segments, phase_labels)``.  Optional additive Gaussian
    noise (HU) is seeded and applied to the segments only.
    """
    if len(schedule) > len(spec.chest):
        raise ScheduleError(
            f"schedule has {len(schedule)} timepoints, trace only {len(spec.chest)}"
        )
    schedule.check_tiles(spec.grid.dims[2])
    template = spec.template()
    rng = np.random.default_rng(noise_seed)
    segments = []
    for t in range(len(schedule)):
        frame = bspline.warp_volume(template, gt_motion(spec, t))
        seg = extract_segment(frame, int(schedule.z_lo[t]), int(schedule.z_hi[t]), t)
        if noise_sigma > 0:
            seg.values = (
                seg.values.astype(np.float64) + rng.normal(0.0, noise_sigma, seg.values.shape)
            ).astype(np.float32)
        segments.append(seg)
    return segments, schedule.phase.copy()


def sort_4dct(segments, phase_labels, n_phases: int = 10) -> list[Volume]:
    """Phase-sort segments into stacked per-phase volumes.

    For each (phase, couch) bin the segment whose fractional phase is
    closest to the bin centre wins.  A bin with no candidate is reported
    via :class:`SortingGapWarning` and filled with the segment closest in
    circular phase distance.
    """
    phase_labels = np.asarray(phase_labels, dtype=np.float64)
    if len(segments) != phase_labels.size:
        raise ValueError("one phase label per segment required")
    grid = segments[0].parent_grid
    slabs = {}
    for k, seg in enumerate(segments):
        if seg.parent_grid != grid:
            raise ValueError("segments come from different grids")
        slabs.setdefault((seg.z_lo, seg.z_hi), []).append(k)
    ranges = sorted(slabs)
    covered = np.zeros(grid.dims[2], dtype=bool)
    for lo, hi in ranges:
        covered[lo : hi + 1] = True
    if not covered.all():
        raise ScheduleError("segments do not tile the volume")

    bins = np.floor(phase_labels * n_phases / 10.0).astype(np.int64)
    volumes = []
    for p in range(n_phases):
        centre = (p + 0.5) * 10.0 / n_phases
        vol = np.empty(grid.shape_zyx, dtype=np.float32)
        for lo, hi in ranges:
            ks = [k for k in slabs[(lo, hi)] if bins[k] == p]
            if ks:
                pick = min(ks, key=lambda k: (abs(phase_labels[k] - centre), k))
            else:
                warnings.warn(
                    f"no segment for phase {p} at slab [{lo}, {hi}]; "
                    "filling from nearest phase",
                    SortingGapWarning,
                    stacklevel=2,
                )
                dist = np.minimum(
                    np.abs(phase_labels - centre), 10.0 - np.abs(phase_labels - centre)
                )
                pick = min(slabs[(lo, hi)], key=lambda k: (dist[k], k))
            vol[lo : hi + 1] = segments[pick].values
        volumes.append(Volume(grid, vol))
    return volumes


# ---------------------------------------------------------------------------
# Diaphragm height measurement (artifact quantification)
# ---------------------------------------------------------------------------


def lung_window(spec: PhantomSpec, half_voxels: int = 4, side: float = -1.0):
    """Voxel index window (x_slice, y_slice) centred in one lung."""
    g = spec.grid
    ix = int(round((side * spec.lung_dx) / g.spacing[0] + 0.5 * (g.dims[0] - 1)))
    iy = int(round(spec.lung_dy / g.spacing[1] + 0.5 * (g.dims[1] - 1)))
    return (
        slice(max(ix - half_voxels, 0), min(ix + half_voxels + 1, g.dims[0])),
        slice(max(iy - half_voxels, 0), min(iy + half_voxels + 1, g.dims[1])),
    )


def lung_fraction_profile(vol: Volume, x_window: slice, y_window: slice, hu_threshold: float = -500.0) -> np.ndarray:
    """Per-slice fraction of window voxels darker than ``hu_threshold``."""
    patch = vol.values[:, y_window, x_window]
    return (patch < hu_threshold).mean(axis=(1, 2))


def _upward_crossing(profile: np.ndarray, z0: int, z1: int, level: float = 0.5) -> float:
    """Continuous slice index of the first upward crossing of ``level``
    within [z0, z1], or nan."""
    for k in range(z0, z1):
        if profile[k] < level <= profile[k + 1]:
            return k + (level - profile[k]) / (profile[k + 1] - profile[k])
    return float("nan")


def diaphragm_step(vol: Volume, slab_bounds, x_window: slice, y_window: slice) -> float:
    """Largest diaphragm-height jump (slices) between adjacent couch slabs.

    Each slab gets an independent lung-boundary estimate (0.5 crossing of
    the windowed lung fraction); consistent anatomy localises the boundary
    in one slab, so any measurable adjacent-slab jump flags a stack
    artifact.  Returns 0.0 when fewer than two adjacent slabs contain a
    boundary.
    """
    profile = lung_fraction_profile(vol, x_window, y_window)
    heights = []
    for lo, hi in slab_bounds:
        heights.append(_upward_crossing(profile, lo, min(hi, len(profile) - 2)))
    best = 0.0
    for a, b in zip(heights, heights[1:]):
        if np.isfinite(a) and np.isfinite(b):
            best = max(best, abs(b - a))
    return best


def slab_bounds(schedule: AcquisitionSchedule) -> list[tuple[int, int]]:
    pairs = sorted({(int(lo), int(hi)) for lo, hi in zip(schedule.z_lo, schedule.z_hi)})
    return pairs
