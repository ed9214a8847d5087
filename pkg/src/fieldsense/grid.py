"""Gridded snapshot series: loading, masking, coarsening, windowing, indexing.

A snapshot series stores only the valid (unmasked) cells of each daily field,
flattened in row-major order over the grid. All index <-> coordinate mapping
lives on :class:`GridSpec` so pivot indices are reproducible across runs.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_json
from .validation import as_float_matrix, check_count, require

SNAPSHOT_LAYOUT = "cell-major row-major, time fastest"

_DTYPE_CODES = {"f32": "<f4", "f64": "<f8"}


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Rectangular grid geometry, cell size, geographic origin and validity mask.

    The origin is the north-west corner of the grid; latitude decreases with
    increasing row index and longitude increases with column index.
    `cell_size_deg` is the optional (lat, lon) extent of one cell in degrees;
    without it cells have no geographic coordinates.
    """

    rows: int
    cols: int
    cell_size_km: float = 1.0
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    mask: np.ndarray | None = None
    cell_size_deg: tuple[float, float] | None = None

    def __post_init__(self):
        require(self.rows >= 1 and self.cols >= 1, "grid must have rows >= 1 and cols >= 1")
        require(self.cell_size_km > 0, "cell_size_km must be positive")
        mask = self.mask
        if mask is None:
            mask = np.ones((self.rows, self.cols), dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            require(mask.shape == (self.rows, self.cols),
                    f"mask shape {mask.shape} does not match grid {(self.rows, self.cols)}")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        require(bool(mask.any()), "grid has no valid cells")

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            (self.rows, self.cols, self.cell_size_km, self.origin_lat,
             self.origin_lon, self.cell_size_deg)
            == (other.rows, other.cols, other.cell_size_km, other.origin_lat,
                other.origin_lon, other.cell_size_deg)
            and np.array_equal(self.mask, other.mask)
        )

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid_indices(self) -> np.ndarray:
        """Flat row-major indices of valid cells, in valid-cell order."""
        return np.flatnonzero(self.mask.ravel())

    def cell_coords(self, cells) -> tuple[np.ndarray, np.ndarray]:
        """Map valid-cell indices (0..n_valid-1) to (row, col) arrays."""
        cells = np.asarray(cells, dtype=np.intp)
        flat = self.valid_indices()
        require(cells.size == 0 or (cells.min() >= 0 and cells.max() < flat.size),
                "valid-cell index out of range")
        picked = flat[cells]
        return picked // self.cols, picked % self.cols

    def cell_latlon(self, cells) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center latitude/longitude, NaN when degree metadata is absent."""
        rows, cols = self.cell_coords(cells)
        if self.cell_size_deg is None:
            nan = np.full(rows.shape, np.nan)
            return nan, nan.copy()
        dlat, dlon = self.cell_size_deg
        lat = self.origin_lat - (rows + 0.5) * dlat
        lon = self.origin_lon + (cols + 0.5) * dlon
        return lat, lon

    def flatten(self, field2d) -> np.ndarray:
        field2d = np.asarray(field2d, dtype=np.float64)
        require(field2d.shape == (self.rows, self.cols),
                f"field shape {field2d.shape} does not match grid {(self.rows, self.cols)}")
        return field2d[self.mask]

    def unflatten(self, vector) -> np.ndarray:
        """Expand a length-n_valid vector to a 2-D field, NaN on masked cells."""
        vector = np.asarray(vector, dtype=np.float64).ravel()
        require(vector.size == self.n_valid,
                f"vector length {vector.size} does not match {self.n_valid} valid cells")
        out = np.full((self.rows, self.cols), np.nan)
        out[self.mask] = vector
        return out

    def to_dict(self) -> dict:
        info = {
            "rows": self.rows,
            "cols": self.cols,
            "cell_size_km": self.cell_size_km,
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "valid_cells": [int(i) for i in self.valid_indices()],
        }
        if self.cell_size_deg is not None:
            info["cell_size_deg_lat"] = self.cell_size_deg[0]
            info["cell_size_deg_lon"] = self.cell_size_deg[1]
        return info

    @classmethod
    def from_dict(cls, info: dict) -> "GridSpec":
        rows, cols = int(info["rows"]), int(info["cols"])
        mask = np.zeros(rows * cols, dtype=bool)
        mask[np.asarray(info["valid_cells"], dtype=np.intp)] = True
        return cls(
            rows=rows,
            cols=cols,
            cell_size_km=float(info.get("cell_size_km", 1.0)),
            origin_lat=float(info.get("origin_lat", 0.0)),
            origin_lon=float(info.get("origin_lon", 0.0)),
            mask=mask.reshape(rows, cols),
            cell_size_deg=_cell_size_deg_from(info),
        )


def _cell_size_deg_from(header: dict) -> tuple[float, float] | None:
    if "cell_size_deg_lat" in header and "cell_size_deg_lon" in header:
        return (float(header["cell_size_deg_lat"]), float(header["cell_size_deg_lon"]))
    return None


def unflatten(vector, grid: GridSpec) -> np.ndarray:
    """Functional alias for :meth:`GridSpec.unflatten`."""
    return grid.unflatten(vector)


@dataclass(frozen=True)
class SnapshotSeries:
    """Valid-cell values (n x m) with daily timestamps.

    `values[i, t]` is the i-th valid cell at snapshot t. Values are finite by
    construction: masking happens at load time.
    """

    grid: GridSpec
    values: np.ndarray
    timestamps: np.ndarray
    dt_days: float = 1.0
    units: str = "ug/m3"

    def __post_init__(self):
        values = as_float_matrix(self.values, "values")
        require(values.shape[0] == self.grid.n_valid,
                f"values has {values.shape[0]} rows but grid has {self.grid.n_valid} valid cells")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        ts = np.asarray(self.timestamps, dtype="datetime64[D]")
        require(ts.ndim == 1 and ts.size == values.shape[1],
                "timestamps length must equal the snapshot count")
        require(self.dt_days > 0, "dt_days must be positive")
        if ts.size > 1:
            diffs = np.diff(ts).astype("timedelta64[D]").astype(np.int64)
            require(bool((diffs > 0).all()), "timestamps must be strictly increasing")
            require(bool((np.abs(diffs - self.dt_days) <= 1.0).all()),
                    "timestamps must be uniformly spaced (within one day of dt_days)")
        ts = ts.copy()
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.values.shape[1]

    @property
    def start_date(self) -> np.datetime64:
        return self.timestamps[0]

    def day_offsets(self) -> np.ndarray:
        return np.arange(self.n_snapshots) * self.dt_days

    def snapshot_field(self, t: int) -> np.ndarray:
        """2-D field of snapshot t (NaN at masked cells)."""
        return self.grid.unflatten(self.values[:, t])


def make_timestamps(start_date, n: int, dt_days: float = 1.0) -> np.ndarray:
    start = np.datetime64(start_date, "D")
    steps = np.floor(np.arange(n) * dt_days + 0.5).astype(np.int64)
    return start + steps.astype("timedelta64[D]")


def series_from_dense(dense, grid_kwargs: dict | None = None,
                      start_date="2000-01-01", dt_days: float = 1.0,
                      units: str = "ug/m3") -> SnapshotSeries:
    """Build a series from a dense (rows, cols, m) cube; non-finite marks missing.

    A cell that is non-finite in any snapshot is masked for the whole series.
    """
    dense = np.asarray(dense, dtype=np.float64)
    require(dense.ndim == 3, f"dense cube must be 3-D, got ndim={dense.ndim}")
    rows, cols, m = dense.shape
    require(m >= 1, "dense cube has no snapshots")
    mask = np.isfinite(dense).all(axis=2)
    grid = GridSpec(rows=rows, cols=cols, mask=mask, **(grid_kwargs or {}))
    values = dense.reshape(rows * cols, m)[grid.valid_indices(), :]
    return SnapshotSeries(grid=grid, values=values,
                          timestamps=make_timestamps(start_date, m, dt_days),
                          dt_days=dt_days, units=units)


def load_snapshots(header_path: str | Path) -> SnapshotSeries:
    """Load a snapshot series from a JSON header + binary payload, or from CSV.

    The JSON header carries {rows, cols, cell_size_km, origin_lat, origin_lon,
    dt_days, start_date, n_snapshots, payload_file, dtype, layout} and the
    payload holds rows*cols*n_snapshots little-endian values, cell-major
    (row-major over the grid) with time fastest. Non-finite values mark
    missing cells; a cell missing in any snapshot is masked throughout.
    """
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"snapshot header not found: {header_path}")
    if header_path.suffix.lower() == ".csv":
        return _load_snapshots_csv(header_path)
    header = json.loads(header_path.read_text())
    rows = check_count(header["rows"], "rows")
    cols = check_count(header["cols"], "cols")
    m = check_count(header["n_snapshots"], "n_snapshots")
    dt_days = float(header.get("dt_days", 1.0))
    require(dt_days > 0, "dt_days must be positive (timestamps would not increase)")
    layout = header.get("layout", SNAPSHOT_LAYOUT)
    require(layout == SNAPSHOT_LAYOUT, f"unsupported payload layout: {layout!r}")
    dtype = header.get("dtype", "f64")
    require(dtype in _DTYPE_CODES, f"unsupported dtype: {dtype!r}")
    payload_path = header_path.parent / header["payload_file"]
    if not payload_path.exists():
        raise FileNotFoundError(f"snapshot payload not found: {payload_path}")
    itemsize = np.dtype(_DTYPE_CODES[dtype]).itemsize
    expected = rows * cols * m * itemsize
    actual = payload_path.stat().st_size
    if actual != expected:
        raise ValueError(
            f"payload size mismatch: header implies {expected} bytes "
            f"({rows}x{cols}x{m}x{itemsize}), file has {actual}")
    raw = np.fromfile(payload_path, dtype=_DTYPE_CODES[dtype])
    dense = raw.astype(np.float64).reshape(rows, cols, m)
    return series_from_dense(
        dense,
        grid_kwargs={
            "cell_size_km": float(header.get("cell_size_km", 1.0)),
            "origin_lat": float(header.get("origin_lat", 0.0)),
            "origin_lon": float(header.get("origin_lon", 0.0)),
            "cell_size_deg": _cell_size_deg_from(header),
        },
        start_date=header.get("start_date", "2000-01-01"),
        dt_days=dt_days,
        units=header.get("units", "ug/m3"),
    )


_CSV_LABEL = re.compile(r"^r(\d+)c(\d+)$")


def _load_snapshots_csv(path: Path) -> SnapshotSeries:
    # One row per snapshot, header row of r{i}c{j} labels; blanks/NaN mark missing.
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            labels = next(reader)
        except StopIteration:
            raise ValueError(f"empty CSV snapshot file: {path}") from None
        coords = []
        for label in labels:
            match = _CSV_LABEL.match(label.strip())
            require(match is not None, f"bad CSV column label {label!r}; expected r<i>c<j>")
            coords.append((int(match.group(1)), int(match.group(2))))
        rows = max(r for r, _ in coords) + 1
        cols = max(c for _, c in coords) + 1
        require(len(coords) == rows * cols and sorted(coords) == [
            (r, c) for r in range(rows) for c in range(cols)
        ], "CSV labels must cover every cell of the grid exactly once")
        snapshots = []
        for line in reader:
            if not line:
                continue
            require(len(line) == len(coords),
                    f"CSV row has {len(line)} fields, expected {len(coords)}")
            snapshots.append([float(x) if x.strip() != "" else np.nan for x in line])
    require(len(snapshots) >= 1, "CSV contains no snapshot rows")
    dense = np.empty((rows, cols, len(snapshots)))
    for t, snap in enumerate(snapshots):
        for (r, c), value in zip(coords, snap):
            dense[r, c, t] = value
    return series_from_dense(dense)


def save_snapshots(series: SnapshotSeries, out_dir: str | Path,
                   dtype: str = "f64", stem: str = "snapshots") -> Path:
    """Write header JSON + binary payload; returns the header path."""
    require(dtype in _DTYPE_CODES, f"unsupported dtype: {dtype!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = series.grid
    dense = np.full((grid.rows * grid.cols, series.n_snapshots), np.nan)
    dense[grid.valid_indices(), :] = series.values
    payload_name = f"{stem}.bin"
    atomic_write_bytes(out_dir / payload_name,
                       np.ascontiguousarray(dense).astype(_DTYPE_CODES[dtype]).tobytes())
    header = {
        "rows": grid.rows,
        "cols": grid.cols,
        "cell_size_km": grid.cell_size_km,
        "origin_lat": grid.origin_lat,
        "origin_lon": grid.origin_lon,
        "dt_days": series.dt_days,
        "start_date": str(series.start_date),
        "n_snapshots": series.n_snapshots,
        "payload_file": payload_name,
        "dtype": dtype,
        "layout": SNAPSHOT_LAYOUT,
        "units": series.units,
    }
    if grid.cell_size_deg is not None:
        header["cell_size_deg_lat"] = grid.cell_size_deg[0]
        header["cell_size_deg_lon"] = grid.cell_size_deg[1]
    header_path = out_dir / f"{stem}.json"
    atomic_write_json(header_path, header)
    return header_path


def coarsen(series: SnapshotSeries, factor: int) -> SnapshotSeries:
    """Block-average onto a factor x factor coarser grid.

    Each output cell is the mean of the valid fine cells in its block (partial
    edge blocks average whatever cells exist); an output cell is masked iff
    its block has no valid fine cells.
    """
    factor = check_count(factor, "factor")
    grid = series.grid
    if factor == 1:
        return series
    out_rows = -(-grid.rows // factor)
    out_cols = -(-grid.cols // factor)
    fine = grid.valid_indices()
    block = (fine // grid.cols // factor) * out_cols + (fine % grid.cols) // factor
    counts = np.bincount(block, minlength=out_rows * out_cols)
    sums = np.zeros((out_rows * out_cols, series.n_snapshots))
    np.add.at(sums, block, series.values)
    valid = counts > 0
    values = sums[valid] / counts[valid, None]
    out_grid = GridSpec(
        rows=out_rows,
        cols=out_cols,
        cell_size_km=grid.cell_size_km * factor,
        origin_lat=grid.origin_lat,
        origin_lon=grid.origin_lon,
        mask=valid.reshape(out_rows, out_cols),
        cell_size_deg=None if grid.cell_size_deg is None else
        (grid.cell_size_deg[0] * factor, grid.cell_size_deg[1] * factor),
    )
    return SnapshotSeries(grid=out_grid, values=values,
                          timestamps=series.timestamps, dt_days=series.dt_days,
                          units=series.units)


def split_windows(series: SnapshotSeries, window_len: int) -> tuple[SnapshotSeries, SnapshotSeries]:
    """First and last `window_len` snapshots; the windows overlap when m < 2*window_len."""
    window_len = check_count(window_len, "window_len")
    m = series.n_snapshots
    require(m >= window_len, f"series has {m} snapshots, fewer than window_len={window_len}")
    spans = [(0, window_len), (m - window_len, m)]
    out = []
    for lo, hi in spans:
        out.append(SnapshotSeries(
            grid=series.grid,
            values=series.values[:, lo:hi].copy(),
            timestamps=series.timestamps[lo:hi].copy(),
            dt_days=series.dt_days,
            units=series.units,
        ))
    return out[0], out[1]
