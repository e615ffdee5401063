"""Evaluation against the phantom ground truth: DSC, TRE, RMSE.

The estimated tumor is delineated on the estimated reference image
(connected-component analysis near the known tumor site) and carried to
each timepoint by the estimated motion; the true tumor is the template
mask carried by the ground-truth motion.  Delineating on the estimate
keeps the comparison valid when the fit anchors its reference at a
slightly different breath state than the template.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import bspline, phantom
from .bspline import ControlGrid
from .errors import GeometryError
from .volgrid import Grid3, Mask, Volume

DELINEATION_HU = -370.0  # midway between lung and soft tissue
SEARCH_MARGIN_MM = (6.0, 8.0, 16.0)  # beyond the tumor radius, per axis


def dsc(a: Mask, b: Mask) -> float:
    """Dice similarity coefficient; 1.0 when both masks are empty."""
    if a.grid != b.grid:
        raise GeometryError("masks live on different grids")
    na, nb = a.count(), b.count()
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a.values, b.values).sum())
    return 2.0 * inter / (na + nb)


def centroid_mm(mask: Mask) -> np.ndarray:
    """Unweighted voxel centroid in world mm."""
    if mask.count() == 0:
        raise ValueError("mask is empty")
    kji = np.argwhere(mask.values > 0).astype(np.float64)  # (n, 3) as (k, j, i)
    mean = kji.mean(axis=0)[::-1]  # -> (i, j, k)
    g = mask.grid
    return np.asarray(g.origin) + mean * np.asarray(g.spacing)


def tre_centroid(a: Mask, b: Mask) -> float:
    """Euclidean distance between mask centroids, in mm."""
    if a.grid != b.grid:
        raise GeometryError("masks live on different grids")
    return float(np.linalg.norm(centroid_mm(a) - centroid_mm(b)))


def rmse(a: Volume, b: Volume, region: Mask | None = None) -> float:
    """Root-mean-square intensity difference (HU), optionally over a mask."""
    if a.grid != b.grid:
        raise GeometryError("volumes live on different grids")
    d = a.values.astype(np.float64) - b.values.astype(np.float64)
    if region is not None:
        if region.grid != a.grid:
            raise GeometryError("region mask lives on a different grid")
        sel = region.values > 0
        if not sel.any():
            raise ValueError("region mask is empty")
        d = d[sel]
    return float(np.sqrt(np.mean(d * d)))


def warp_mask(mask: Mask, cg: ControlGrid) -> Mask:
    """Carry a binary mask through a transform: trilinear on the {0,1}
    field, then threshold at 0.5."""
    vol = Volume(mask.grid, mask.values.astype(np.float32))
    warped = bspline.warp_volume(vol, cg, fill=0.0)
    return Mask(mask.grid, (warped.values > 0.5).astype(np.uint8))


def delineate_blob(
    vol: Volume,
    center_mm: np.ndarray,
    half_mm: np.ndarray,
    hu_threshold: float = DELINEATION_HU,
    min_voxels: int = 5,
    max_voxels: int | None = None,
) -> Mask:
    """Segment an isolated bright blob near a known site.

    Connected components of ``vol > hu_threshold`` are kept when their
    centroid falls inside the search box and their size stays below
    ``max_voxels`` (rejects the torso bulk and other large structures).
    Returns the union, possibly empty when artifacts tore the blob apart.
    """
    g = vol.grid
    labels, n = ndimage.label(vol.values > hu_threshold)
    keep = np.zeros(vol.grid.shape_zyx, dtype=bool)
    if n:
        sizes = np.bincount(labels.ravel())
        centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, n + 1))
        lo = np.asarray(center_mm) - np.asarray(half_mm)
        hi = np.asarray(center_mm) + np.asarray(half_mm)
        for lab, ckji in enumerate(centroids, start=1):
            if sizes[lab] < min_voxels:
                continue
            if max_voxels is not None and sizes[lab] > max_voxels:
                continue
            pos = np.asarray(g.origin) + np.asarray(ckji)[::-1] * np.asarray(g.spacing)
            if np.all(pos >= lo) and np.all(pos <= hi):
                keep |= labels == lab
    return Mask(g, keep.astype(np.uint8))


def delineate_tumor(vol: Volume, spec: phantom.PhantomSpec) -> Mask:
    """Tumor delineation on an estimated or sorted volume."""
    r = spec.tumor_radius
    half = np.asarray(SEARCH_MARGIN_MM) + r
    voxvol = float(np.prod(spec.grid.spacing))
    expected = 4.0 / 3.0 * np.pi * r**3 / voxvol
    return delineate_blob(
        vol,
        spec.tumor_center_world(),
        half,
        max_voxels=int(5 * expected),
    )


@dataclass
class EvalReport:
    """Per-timepoint metrics plus mean +/- sd summaries."""

    timepoints: np.ndarray
    dsc: np.ndarray
    tre_mm: np.ndarray
    rmse_hu: np.ndarray

    def summary(self) -> dict:
        out = {}
        for name, arr in (("dsc", self.dsc), ("tre_mm", self.tre_mm), ("rmse_hu", self.rmse_hu)):
            finite = arr[np.isfinite(arr)]
            out[name + "_mean"] = float(finite.mean()) if finite.size else float("nan")
            out[name + "_sd"] = float(finite.std()) if finite.size else float("nan")
            out[name + "_n"] = int(finite.size)
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "dsc", "tre_mm", "rmse_hu"])
            for k in range(self.timepoints.size):
                w.writerow(
                    [int(self.timepoints[k])]
                    + [repr(float(v)) for v in (self.dsc[k], self.tre_mm[k], self.rmse_hu[k])]
                )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _compare_frame(
    est_frame: Volume,
    est_mask: Mask,
    spec: phantom.PhantomSpec,
    t: int,
):
    gt_f = phantom.gt_frame(spec, t)
    gt_m = phantom.gt_tumor_mask(spec, t)
    d = dsc(est_mask, gt_m)
    tre = tre_centroid(est_mask, gt_m) if est_mask.count() else float("nan")
    return d, tre, rmse(est_frame, gt_f)


def evaluate_run(result, spec: phantom.PhantomSpec, timepoints: Sequence[int]) -> EvalReport:
    """Score a pipeline result against the phantom ground truth.

    ``result`` needs an ``i0`` volume and a ``compose(t)`` transform
    accessor (a :class:`~motion4d.pipeline.PipelineResult` or anything
    shaped like one).
    """
    if len(timepoints) == 0:
        raise ValueError("no timepoints to evaluate")
    ref_mask = delineate_tumor(result.i0, spec)
    ds, tres, rs = [], [], []
    for t in timepoints:
        cg = result.compose(int(t))
        est_frame = bspline.warp_volume(result.i0, cg)
        est_mask = warp_mask(ref_mask, cg)
        d, tre, r = _compare_frame(est_frame, est_mask, spec, int(t))
        ds.append(d)
        tres.append(tre)
        rs.append(r)
    return EvalReport(np.asarray(timepoints), np.asarray(ds), np.asarray(tres), np.asarray(rs))


def evaluate_sorted_baseline(
    phase_volumes: Sequence[Volume],
    phase_labels: np.ndarray,
    spec: phantom.PhantomSpec,
    timepoints: Sequence[int],
) -> EvalReport:
    """Score the sorted-4DCT baseline: the frame at ``t`` is the phase
    volume of ``t``'s bin (repeated over time), delineated per phase."""
    if len(timepoints) == 0:
        raise ValueError("no timepoints to evaluate")
    bins = np.floor(np.asarray(phase_labels, dtype=np.float64)).astype(np.int64)
    masks = {}
    ds, tres, rs = [], [], []
    for t in timepoints:
        b = int(bins[int(t)]) % len(phase_volumes)
        if b not in masks:
            masks[b] = delineate_tumor(phase_volumes[b], spec)
        d, tre, r = _compare_frame(phase_volumes[b], masks[b], spec, int(t))
        ds.append(d)
        tres.append(tre)
        rs.append(r)
    return EvalReport(np.asarray(timepoints), np.asarray(ds), np.asarray(tres), np.asarray(rs))
