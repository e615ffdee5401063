"""Command line front end: simulate, fit, evaluate, export.

Heavy imports happen inside the command functions so MOTION4D_THREADS can
cap the BLAS thread pools before numpy is first loaded (0 or unset =
library default).  Every command writes a manifest that hashes all its
inputs; outputs are byte-deterministic for identical inputs and seed.

Exit codes: 0 success, 2 configuration/argument error, 3 data or format
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__


def _configure_threads() -> None:
    val = os.environ.get("MOTION4D_THREADS", "").strip()
    if not val:
        return
    n = int(val)  # ValueError surfaces as a configuration error
    if n < 0:
        raise ValueError(f"MOTION4D_THREADS must be >= 0, got {n}")
    if n > 0:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, str(n))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> tuple[str, int]:
    data = Path(path).read_bytes()
    return hashlib.sha256(data).hexdigest(), len(data)


def _iter_input_files(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            files.append(p)
    return files


def _write_manifest(outdir: Path, command: str, inputs, seed) -> None:
    """Record what produced this directory.

    The timestamp honours SOURCE_DATE_EPOCH and is otherwise omitted
    ("unset"), keeping reruns byte-identical.
    """
    entries = []
    for f in _iter_input_files(inputs):
        digest, nbytes = _sha256(f)
        entries.append({"path": str(f), "sha256": digest, "bytes": nbytes})
    combined = hashlib.sha256()
    combined.update(__version__.encode())
    combined.update(repr(seed).encode())
    for e in entries:
        combined.update(e["sha256"].encode())
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "inputs": entries,
        "config_hash": combined.hexdigest(),
        "created_utc": int(epoch) if epoch else "unset",
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _default_couch_count(nz: int, n_times: int) -> int:
    for k in range(8, 0, -1):
        if nz % k == 0 and n_times % k == 0:
            return k
    return 1


def cmd_simulate(args) -> None:
    from .errors import FormatError
    from . import phantom
    from .hypergrad import init_surrogates_signal
    from .volgrid import write_mask, write_segment, write_volume
    from .bspline import write_control_grid
    import csv

    spec_path = Path(args.spec)
    try:
        spec_obj = json.loads(spec_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{spec_path}: {e}") from e
    spec = phantom.PhantomSpec.from_json(spec_obj)

    if args.schedule:
        schedule = phantom.AcquisitionSchedule.from_csv(args.schedule, spec.chest.dt)
        inputs = [spec_path, Path(args.schedule)]
    else:
        n_couch = _default_couch_count(spec.grid.dims[2], len(spec.chest))
        schedule = phantom.default_schedule(spec, n_couch)
        inputs = [spec_path]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    segments, phases = phantom.simulate_acquisition(spec, schedule)

    (out / "spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    schedule.to_csv(out / "schedule.csv")
    spec.chest.to_csv(out / "chest_trace.csv")
    spec.diaphragm.to_csv(out / "diaphragm_trace.csv")
    with open(out / "phases.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "phase"])
        for t, p in enumerate(phases):
            w.writerow([t, repr(float(p))])
    init_surrogates_signal(spec.chest).to_csv(out / "signals.csv")

    seg_dir = out / "segments"
    seg_dir.mkdir(exist_ok=True)
    for seg in segments:
        write_segment(seg, seg_dir / f"t{seg.t:04d}.json")

    sort_dir = out / "sorted"
    sort_dir.mkdir(exist_ok=True)
    for p, vol in enumerate(phantom.sort_4dct(segments, phases)):
        write_volume(vol, sort_dir / f"phase{p}.json")

    gt_dir = out / "gt"
    (gt_dir / "frames").mkdir(parents=True, exist_ok=True)
    write_volume(spec.template(), gt_dir / "template.json")
    write_mask(spec.tumor_mask(), gt_dir / "tumor_mask.json")
    c1, c2 = spec.gt_grids()
    write_control_grid(c1, gt_dir / "model_1.json")
    write_control_grid(c2, gt_dir / "model_2.json")
    for t in range(len(segments)):
        write_volume(phantom.gt_frame(spec, t), gt_dir / "frames" / f"t{t:04d}.json")

    seed = None if spec.trace_params is None else spec.trace_params.get("seed")
    _write_manifest(out, "simulate", inputs, seed)
    print(f"simulate: {len(segments)} segments -> {out}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _read_phases(path: Path):
    import numpy as np
    import csv
    from .errors import FormatError

    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    if not rows or rows[0] != ["t", "phase"]:
        raise FormatError(f"{path}: expected header 't,phase'")
    return np.array([float(r[1]) for r in rows[1:]], dtype=np.float64)


def _load_segments(data: Path):
    from .errors import ConfigurationError
    from .volgrid import read_segment

    seg_dir = data / "segments"
    paths = sorted(seg_dir.glob("t*.json"))
    if not paths:
        raise ConfigurationError(f"no segments found under {seg_dir}")
    return [read_segment(p) for p in paths]


def cmd_fit(args) -> None:
    from .errors import ConfigurationError, FormatError
    from .pipeline import PipelineConfig, run_pipeline, save_result
    from .surrmodel import SurrogateMatrix
    from .volgrid import average_volumes, read_volume
    import shutil

    config_path = Path(args.config)
    try:
        cfg_obj = json.loads(config_path.read_text())
    except OSError as e:
        raise ConfigurationError(f"{config_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{config_path}: {e}") from e
    cfg = PipelineConfig.from_json(cfg_obj)

    data = Path(args.data)
    segs = _load_segments(data)

    signals = None
    phases = None
    if cfg.mode in ("driven", "optimized"):
        sig_path = data / "signals.csv"
        if not sig_path.exists():
            raise ConfigurationError(f"mode {cfg.mode!r} requires {sig_path}")
        signals = SurrogateMatrix.from_csv(sig_path)
    else:
        ph_path = data / "phases.csv"
        if not ph_path.exists():
            raise ConfigurationError(f"mode 'free' requires {ph_path}")
        phases = _read_phases(ph_path)

    init_i0 = None
    sorted_dir = data / "sorted"
    phase_files = sorted(sorted_dir.glob("phase*.json"))
    if phase_files:
        init_i0 = average_volumes([read_volume(p) for p in phase_files])

    result = run_pipeline(cfg, segs, signals=signals, phases=phases, init_i0=init_i0)

    out = Path(args.out)
    save_result(result, out)
    ph_path = data / "phases.csv"
    if ph_path.exists():
        shutil.copyfile(ph_path, out / "phases.csv")
    _write_manifest(out, "fit", [config_path, data], cfg.seed)
    final = result.traces[-1]["objective"] if result.traces else float("nan")
    print(f"fit: mode={cfg.mode} final objective {final:.6g} -> {out}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> None:
    from .errors import FormatError
    from . import phantom
    from .metrics import evaluate_run, evaluate_sorted_baseline
    from .pipeline import load_result
    from .volgrid import read_volume

    result_dir = Path(args.result)
    gt_dir = Path(args.gt)
    result = load_result(result_dir)
    try:
        spec_obj = json.loads((gt_dir / "spec.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{gt_dir}/spec.json: {e}") from e
    spec = phantom.PhantomSpec.from_json(spec_obj)
    phases = _read_phases(gt_dir / "phases.csv")
    timepoints = list(range(min(result.signals.n_times, phases.size)))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_run(result, spec, timepoints)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")

    phase_files = sorted((gt_dir / "sorted").glob("phase*.json"))
    if phase_files:
        vols = [read_volume(p) for p in phase_files]
        baseline = evaluate_sorted_baseline(vols, phases, spec, timepoints)
        baseline.to_csv(out / "baseline_report.csv")
        baseline.to_json(out / "baseline_report.json")

    _write_manifest(out, "evaluate", [result_dir, gt_dir], None)
    s = report.summary()
    print(
        "evaluate: dsc {dsc_mean:.3f}+/-{dsc_sd:.3f} tre {tre_mm_mean:.2f}mm "
        "rmse {rmse_hu_mean:.1f}HU -> {out}".format(out=out, **s)
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _parse_timepoints(text: str, n_times: int):
    text = (text or "").strip()
    if not text:
        return []
    if text == "all":
        return list(range(n_times))
    try:
        ts = [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise ValueError(f"bad --timepoints {text!r}: {e}") from e
    for t in ts:
        if not (0 <= t < n_times):
            raise IndexError(f"timepoint {t} outside [0, {n_times})")
    return ts


def cmd_export(args) -> None:
    from .errors import ConfigurationError
    from .pipeline import export_frames, find_extreme_inhalation, load_result
    from .volgrid import write_volume

    result_dir = Path(args.result)
    result = load_result(result_dir)
    timepoints = _parse_timepoints(args.timepoints, result.signals.n_times)

    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in zip(timepoints, export_frames(result, timepoints)):
        write_volume(frame, frames_dir / f"t{t:04d}.json")

    ph_path = result_dir / "phases.csv"
    if not ph_path.exists():
        raise ConfigurationError(
            f"{ph_path} missing; fit copies it from the data directory"
        )
    phases = _read_phases(ph_path)
    t_deep, t_shallow = find_extreme_inhalation(
        result.signals, phases, inhale_phase=args.inhale_phase, model=result.model
    )
    for tag, t in (("deep", t_deep), ("shallow", t_shallow)):
        write_volume(export_frames(result, [t])[0], out / f"inhale_{tag}.json")
    (out / "extreme_pair.json").write_text(
        json.dumps({"t_deep": t_deep, "t_shallow": t_shallow}, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, "export", [result_dir], None)
    print(f"export: {len(timepoints)} frames, deep t={t_deep}, shallow t={t_shallow} -> {out}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="motion4d",
        description="Variable respiratory motion from unsorted 4DCT segments",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a breathing phantom acquisition")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--schedule", default=None, help="acquisition schedule CSV (default: even couch tiling)")
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the motion model and reconstruct the reference")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--data", required=True, help="data directory from 'simulate'")
    p.add_argument("--out", required=True, help="result directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score a result against the phantom ground truth")
    p.add_argument("--result", required=True, help="result directory from 'fit'")
    p.add_argument("--gt", required=True, help="data directory from 'simulate'")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write estimated real-time frames")
    p.add_argument("--result", required=True, help="result directory from 'fit'")
    p.add_argument("--timepoints", default="", help="comma list, 'all', or empty for the extreme pair only")
    p.add_argument("--inhale-phase", type=int, default=5, help="phase bin labelling end-inhalation")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    try:
        _configure_threads()
        args = _build_parser().parse_args(argv)
        from .errors import (
            ConfigurationError,
            FormatError,
            GeometryError,
            NumericalError,
            ScheduleError,
        )

        try:
            args.func(args)
            return 0
        except ConfigurationError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        except (FormatError, ScheduleError, GeometryError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 3
        except NumericalError as e:
            print(f"error: {e}", file=sys.stderr)
            return 4
        except (ValueError, IndexError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
