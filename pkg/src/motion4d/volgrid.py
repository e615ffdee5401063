"""Regular-grid volumes, slab segments, the resolution pyramid, and file IO.

Conventions shared by every module:

* ``dims`` are ``(nx, ny, nz)``; voxel arrays are stored with shape
  ``(nz, ny, nx)`` in C order, so the flat/raw layout is x-fastest.
* Intensities are Hounsfield units held as float32; geometry (spacing,
  origin, displacements) is float64 millimetres.
* Voxel ``(i, j, k)`` is centred at ``origin + (i*sx, j*sy, k*sz)``.

A volume on disk is a JSON header (``dims``, ``spacing_mm``,
``origin_mm``, ``dtype``, ``data_file``) next to a raw little-endian
payload in canonical ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, GeometryError

AIR_HU = -1000.0


@dataclass(frozen=True)
class Grid3:
    """Geometry of a regular 3-D sampling grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three finite positives, got {self.spacing}")
        if len(self.origin) != 3 or any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"origin must be three finite reals, got {self.origin}")

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def axis_coords(self, axis: int) -> np.ndarray:
        """World (mm) coordinates of voxel centres along one axis (0=x,1=y,2=z)."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis], dtype=np.float64)

    def extent(self) -> tuple[tuple[float, float], ...]:
        """Per-axis (low, high) of the voxel-centre hull in mm."""
        return tuple(
            (self.origin[a], self.origin[a] + self.spacing[a] * (self.dims[a] - 1))
            for a in range(3)
        )

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "origin_mm": list(self.origin),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Grid3":
        try:
            return cls(tuple(obj["dims"]), tuple(obj["spacing_mm"]), tuple(obj["origin_mm"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad grid description: {e}") from e


def _check_same_grid(a: Grid3, b: Grid3, what: str) -> None:
    if a != b:
        raise GeometryError(f"{what}: grids differ ({a} vs {b})")


@dataclass
class Volume:
    """Scalar HU image on a :class:`Grid3`. ``values`` has shape (nz, ny, nx)."""

    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size != self.grid.nvox:
            raise ValueError(f"expected {self.grid.nvox} values, got {v.size}")
        v = np.ascontiguousarray(v.reshape(self.grid.shape_zyx), dtype=np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        self.values = v

    def copy(self) -> "Volume":
        return Volume(self.grid, self.values.copy())


@dataclass
class Mask:
    """Binary label image; values are uint8 in {0, 1}."""

    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size != self.grid.nvox:
            raise ValueError(f"expected {self.grid.nvox} values, got {v.size}")
        v = np.ascontiguousarray(v.reshape(self.grid.shape_zyx), dtype=np.uint8)
        if v.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        self.values = v

    def count(self) -> int:
        return int(self.values.sum())


@dataclass
class Segment:
    """Contiguous slab of slices imaged at one timepoint.

    ``values`` has shape (z_hi - z_lo + 1, ny, nx); slice indices refer to
    ``parent_grid``.
    """

    parent_grid: Grid3
    z_lo: int
    z_hi: int
    t: int
    values: np.ndarray

    def __post_init__(self):
        self.z_lo = int(self.z_lo)
        self.z_hi = int(self.z_hi)
        self.t = int(self.t)
        nx, ny, nz = self.parent_grid.dims
        if not (0 <= self.z_lo <= self.z_hi < nz):
            raise IndexError(f"slab [{self.z_lo}, {self.z_hi}] outside [0, {nz})")
        if self.t < 0:
            raise ValueError("timepoint index must be >= 0")
        v = np.asarray(self.values)
        n_slices = self.z_hi - self.z_lo + 1
        if v.size != nx * ny * n_slices:
            raise ValueError(f"expected {nx * ny * n_slices} slab values, got {v.size}")
        v = np.ascontiguousarray(v.reshape((n_slices, ny, nx)), dtype=np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("segment contains non-finite values")
        self.values = v

    @property
    def n_slices(self) -> int:
        return self.z_hi - self.z_lo + 1


def extract_segment(vol: Volume, z_lo: int, z_hi: int, t: int) -> Segment:
    """Cut slices ``z_lo..z_hi`` (inclusive) out of ``vol`` as the segment
    observed at timepoint ``t``."""
    nz = vol.grid.dims[2]
    if not (0 <= z_lo <= z_hi < nz):
        raise IndexError(f"slice range [{z_lo}, {z_hi}] outside [0, {nz})")
    return Segment(vol.grid, z_lo, z_hi, t, vol.values[z_lo : z_hi + 1].copy())


def _block_mean(a: np.ndarray, factor: int, axis: int) -> np.ndarray:
    """Mean over length-``factor`` blocks along ``axis``; the trailing
    partial block is averaged over the voxels present."""
    if factor == 1:
        return a
    n = a.shape[axis]
    starts = np.arange(0, n, factor)
    sums = np.add.reduceat(a, starts, axis=axis)
    counts = np.minimum(factor, n - starts).astype(np.float64)
    shape = [1] * a.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def downsample(vol: Volume, factor: tuple[int, int, int]) -> Volume:
    """Block-average pooling by an integer factor per axis.

    Output spacing is multiplied by the factor and the origin moves to the
    centre of the first (full) block, keeping the pyramid levels aligned
    in world space.
    """
    fx, fy, fz = (int(f) for f in factor)
    if fx < 1 or fy < 1 or fz < 1:
        raise ValueError(f"downsample factors must be >= 1, got {factor}")
    a = vol.values.astype(np.float64)
    a = _block_mean(a, fz, axis=0)
    a = _block_mean(a, fy, axis=1)
    a = _block_mean(a, fx, axis=2)
    g = vol.grid
    dims = (a.shape[2], a.shape[1], a.shape[0])
    spacing = (g.spacing[0] * fx, g.spacing[1] * fy, g.spacing[2] * fz)
    origin = (
        g.origin[0] + 0.5 * (fx - 1) * g.spacing[0],
        g.origin[1] + 0.5 * (fy - 1) * g.spacing[1],
        g.origin[2] + 0.5 * (fz - 1) * g.spacing[2],
    )
    return Volume(Grid3(dims, spacing, origin), a)


def average_volumes(vols: Sequence[Volume]) -> Volume:
    """Voxel-wise arithmetic mean.

    Inputs are summed in a canonical (payload-sorted) order so the result
    is bit-identical under any permutation of ``vols``.
    """
    if len(vols) == 0:
        raise ValueError("average_volumes needs at least one volume")
    grid = vols[0].grid
    for v in vols[1:]:
        _check_same_grid(grid, v.grid, "average_volumes")
    order = sorted(range(len(vols)), key=lambda i: vols[i].values.tobytes())
    stacked = np.stack([vols[i].values for i in order]).astype(np.float64)
    return Volume(grid, stacked.sum(axis=0) / len(vols))


def resample_to(vol: Volume, grid: Grid3) -> Volume:
    """Trilinear resampling of ``vol`` onto ``grid`` (edge-clamped).

    Used for the coarse-to-fine hand-off of reconstructed images; clamping
    extends edge values where the fine grid reaches past coarse voxel
    centres.
    """
    src = vol.grid
    coords = []
    for axis in range(3):
        q = (grid.axis_coords(axis) - src.origin[axis]) / src.spacing[axis]
        coords.append(np.clip(q, 0.0, src.dims[axis] - 1))
    qx, qy, qz = coords
    px = np.broadcast_to(qx[None, None, :], grid.shape_zyx)
    py = np.broadcast_to(qy[None, :, None], grid.shape_zyx)
    pz = np.broadcast_to(qz[:, None, None], grid.shape_zyx)
    from .bspline import trilinear_gather  # local import to avoid a cycle

    vals, _ = trilinear_gather(vol.values.astype(np.float64), px, py, pz)
    return Volume(grid, vals)


# ---------------------------------------------------------------------------
# File IO: JSON header + raw payload
# ---------------------------------------------------------------------------

_DTYPES = {"f32le": ("<f4", np.float32), "u8": ("|u1", np.uint8)}


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from e
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    return obj


def _write_payload(header_path: Path, array: np.ndarray, dtype: str) -> str:
    data_file = header_path.with_suffix(".raw")
    data_file.write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype][0]).tobytes())
    return data_file.name


def _read_payload(header_path: Path, header: dict, n_expected: int) -> np.ndarray:
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"{header_path}: unsupported dtype {dtype!r}")
    data_file = header_path.parent / str(header.get("data_file", ""))
    try:
        raw = data_file.read_bytes()
    except OSError as e:
        raise FormatError(f"{header_path}: missing payload: {e}") from e
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype][0])
    if arr.size != n_expected:
        raise FormatError(
            f"{header_path}: payload holds {arr.size} values, header implies {n_expected}"
        )
    return arr


def write_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    header = vol.grid.to_json()
    header["dtype"] = "f32le"
    header["data_file"] = _write_payload(path, vol.values, "f32le")
    _write_json(path, header)


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    header = _read_json(path)
    grid = Grid3.from_json(header)
    arr = _read_payload(path, header, grid.nvox)
    if header["dtype"] != "f32le":
        raise FormatError(f"{path}: volume payload must be f32le")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return Volume(grid, arr.copy())


def write_mask(mask: Mask, path: str | Path) -> None:
    path = Path(path)
    header = mask.grid.to_json()
    header["dtype"] = "u8"
    header["data_file"] = _write_payload(path, mask.values, "u8")
    _write_json(path, header)


def read_mask(path: str | Path) -> Mask:
    path = Path(path)
    header = _read_json(path)
    grid = Grid3.from_json(header)
    if header["dtype"] != "u8":
        raise FormatError(f"{path}: mask payload must be u8")
    arr = _read_payload(path, header, grid.nvox)
    if arr.max(initial=0) > 1:
        raise FormatError(f"{path}: mask values outside {{0,1}}")
    return Mask(grid, arr.copy())


def write_segment(seg: Segment, path: str | Path) -> None:
    path = Path(path)
    header = {
        "kind": "segment",
        "parent": seg.parent_grid.to_json(),
        "z_lo": seg.z_lo,
        "z_hi": seg.z_hi,
        "t": seg.t,
        "dtype": "f32le",
    }
    header["data_file"] = _write_payload(path, seg.values, "f32le")
    _write_json(path, header)


def read_segment(path: str | Path) -> Segment:
    path = Path(path)
    header = _read_json(path)
    if header.get("kind") != "segment":
        raise FormatError(f"{path}: not a segment file")
    grid = Grid3.from_json(header.get("parent", {}))
    try:
        z_lo, z_hi, t = int(header["z_lo"]), int(header["z_hi"]), int(header["t"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad slab metadata: {e}") from e
    nx, ny, _ = grid.dims
    arr = _read_payload(path, header, nx * ny * (z_hi - z_lo + 1))
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    try:
        return Segment(grid, z_lo, z_hi, t, arr.copy())
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from e
