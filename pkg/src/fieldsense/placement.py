"""Sensor placement via column-pivoted QR on the transposed mode library.

The pivoted QR is implemented here rather than delegated: the greedy pivot
order IS the product (scipy's qr(pivoting=True) serves as a test oracle
only). Pivots of the transposed basis are spatial locations, in selection
order, with the residual column norm at selection time as each sensor's
score.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .fileio import atomic_write_text
from .grid import GridSpec
from .mrdmd import ModeLibrary
from .validation import require

# equal residual norms within this relative window resolve to the lowest index
TIE_RELATIVE = 1e-12
# recompute a downdated norm from scratch below this fraction of its original
DOWNDATE_GUARD = 1e-6


def pivoted_qr(A, n_pivots: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy column-pivoted Householder QR; returns (pivots, scores).

    At each step the column of maximal residual 2-norm is selected (ties go
    to the lowest original column index), reflected, and the remaining norms
    are downdated with a recomputation guard against cancellation. `scores`
    are the |R_kk| magnitudes, non-increasing by construction. Stops after
    min(p, q) steps, or `n_pivots` if given (the greedy prefix is identical
    either way). Exhausted (all-zero) trailing columns get zero scores in
    ascending index order.
    """
    R = np.array(A, dtype=np.float64, copy=True)
    require(R.ndim == 2, f"matrix must be 2-D, got ndim={R.ndim}")
    p, q = R.shape
    require(p >= 1 and q >= 1, "matrix must have at least one row and column")
    require(bool(np.isfinite(R).all()), "matrix contains non-finite entries")
    k_max = min(p, q)
    if n_pivots is not None:
        require(1 <= n_pivots <= k_max,
                f"n_pivots must lie in [1, {k_max}], got {n_pivots}")
        k_max = n_pivots

    index = np.arange(q)
    norms2 = np.sum(R * R, axis=0)
    orig_norms = np.sqrt(norms2)
    pivots = np.empty(k_max, dtype=np.intp)
    scores = np.empty(k_max, dtype=np.float64)

    for k in range(k_max):
        norms = np.sqrt(np.maximum(norms2[k:], 0.0))
        best = norms.max()
        if best == 0.0:
            # everything left is zero: emit remaining columns by ascending index
            order = np.argsort(index[k:], kind="stable")
            tail = index[k:][order]
            take = k_max - k
            pivots[k:] = tail[:take]
            scores[k:] = 0.0
            break
        tied = np.flatnonzero(norms >= best * (1.0 - TIE_RELATIVE))
        choice = k + tied[np.argmin(index[k:][tied])]

        for arr in (index, norms2, orig_norms):
            arr[[k, choice]] = arr[[choice, k]]
        R[:, [k, choice]] = R[:, [choice, k]]

        x = R[k:, k]
        norm_x = np.linalg.norm(x)
        pivots[k] = index[k]
        scores[k] = norm_x
        if norm_x == 0.0:
            continue
        sign = 1.0 if x[0] >= 0 else -1.0
        v = x.copy()
        v[0] += sign * norm_x
        beta = 2.0 / (v @ v)
        if k + 1 < q:
            tail = R[k:, k + 1:]
            tail -= np.outer(beta * v, v @ tail)
        R[k, k] = -sign * norm_x
        R[k + 1:, k] = 0.0

        if k + 1 < q:
            norms2[k + 1:] -= R[k, k + 1:] ** 2
            np.maximum(norms2[k + 1:], 0.0, out=norms2[k + 1:])
            if k + 1 < p:
                stale = np.flatnonzero(
                    np.sqrt(norms2[k + 1:]) < DOWNDATE_GUARD * orig_norms[k + 1:])
                for j in k + 1 + stale:
                    norms2[j] = float(np.sum(R[k + 1:, j] ** 2))
            else:
                norms2[k + 1:] = 0.0

    return pivots, scores


@dataclass(frozen=True)
class SensorSet:
    """Chosen sensor locations in greedy selection order.

    `pivots` index the valid-cell axis (rows of the library basis). Grid
    coordinates are filled when a GridSpec is supplied; latitude/longitude
    stay NaN without per-cell degree metadata.
    """

    pivots: np.ndarray
    scores: np.ndarray
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None
    lats: np.ndarray | None = None
    lons: np.ndarray | None = None

    def __post_init__(self):
        pivots = np.asarray(self.pivots, dtype=np.intp).ravel().copy()
        scores = np.asarray(self.scores, dtype=np.float64).ravel().copy()
        require(pivots.size >= 1, "sensor set must be non-empty")
        require(scores.size == pivots.size, "scores must match pivot count")
        require(np.unique(pivots).size == pivots.size, "pivot indices must be distinct")
        slack = 1e-8 * max(scores[0], 1.0)
        require(bool((np.diff(scores) <= slack).all()),
                "scores must be non-increasing in selection order")
        for name, arr, dtype in (("pivots", pivots, None), ("scores", scores, None),
                                 ("rows", self.rows, np.intp),
                                 ("cols", self.cols, np.intp),
                                 ("lats", self.lats, np.float64),
                                 ("lons", self.lons, np.float64)):
            if arr is None:
                continue
            if dtype is not None:
                arr = np.asarray(arr, dtype=dtype).ravel().copy()
                require(arr.size == pivots.size, f"{name} must match pivot count")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return self.pivots.size

    def has_geography(self) -> bool:
        return self.lons is not None and bool(np.isfinite(self.lons).all())


def place_sensors(library: ModeLibrary, count: int | None = None,
                  grid: GridSpec | None = None) -> SensorSet:
    """Select sensor cells as QR pivots of the transposed library basis.

    Default count is the library column count r ("r point sensors"); asking
    for more than min(n_cells, r) is refused rather than oversampled.
    """
    r = library.n_columns
    n = library.n_cells
    limit = min(n, r)
    if count is None:
        count = limit
    require(1 <= count <= limit,
            f"sensor count must lie in [1, min(n_cells, n_columns)] = [1, {limit}], "
            f"got {count}")
    if grid is not None:
        require(grid.n_valid == n,
                f"grid has {grid.n_valid} valid cells but library covers {n}")
    pivots, scores = pivoted_qr(library.basis.T, n_pivots=count)
    rows = cols = lats = lons = None
    if grid is not None:
        rows, cols = grid.cell_coords(pivots)
        lats, lons = grid.cell_latlon(pivots)
    return SensorSet(pivots=pivots, scores=scores, rows=rows, cols=cols,
                     lats=lats, lons=lons)


def region_fraction(sensors: SensorSet, meridian_lon: float = -100.0) -> float:
    """Fraction of sensors strictly west of (longitude below) the meridian."""
    require(sensors.count >= 1, "sensor set is empty")
    if sensors.lons is None or not np.isfinite(sensors.lons).all():
        raise ValueError("sensor longitudes unavailable: the grid header lacks "
                         "cell size in degrees, so region statistics cannot be computed")
    return float(np.mean(sensors.lons < meridian_lon))


def sensor_csv(sensors: SensorSet) -> str:
    """CSV with one line per sensor: rank,cell_index,row,col,lat,lon,score.

    `rank` is 1-based selection order; `cell_index` indexes the valid-cell
    ordering. Missing coordinates render as empty fields.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["rank", "cell_index", "row", "col", "lat", "lon", "score"])
    for k in range(sensors.count):
        row = "" if sensors.rows is None else int(sensors.rows[k])
        col = "" if sensors.cols is None else int(sensors.cols[k])
        lat = "" if sensors.lats is None or not np.isfinite(sensors.lats[k]) \
            else f"{sensors.lats[k]:.6f}"
        lon = "" if sensors.lons is None or not np.isfinite(sensors.lons[k]) \
            else f"{sensors.lons[k]:.6f}"
        writer.writerow([k + 1, int(sensors.pivots[k]), row, col, lat, lon,
                         f"{sensors.scores[k]:.12g}"])
    return buffer.getvalue()


def save_sensors(sensors: SensorSet, path: str | Path) -> Path:
    return atomic_write_text(path, sensor_csv(sensors))


def load_sensor_csv(path: str | Path) -> SensorSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sensor CSV not found: {path}")
    pivots, scores, rows, cols, lats, lons = [], [], [], [], [], []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        for record in reader:
            pivots.append(int(record["cell_index"]))
            scores.append(float(record["score"]))
            rows.append(int(record["row"]) if record["row"] != "" else -1)
            cols.append(int(record["col"]) if record["col"] != "" else -1)
            lats.append(float(record["lat"]) if record["lat"] != "" else np.nan)
            lons.append(float(record["lon"]) if record["lon"] != "" else np.nan)
    require(len(pivots) >= 1, f"sensor CSV is empty: {path}")
    has_grid = all(r >= 0 for r in rows)
    return SensorSet(
        pivots=np.array(pivots), scores=np.array(scores),
        rows=np.array(rows) if has_grid else None,
        cols=np.array(cols) if has_grid else None,
        lats=np.array(lats), lons=np.array(lons),
    )


def load_monitor_csv(path: str | Path) -> np.ndarray:
    """Read external monitor locations (lat, lon columns) into an (m, 2) array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"monitor CSV not found: {path}")
    out = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        require(reader.fieldnames is not None
                and "lat" in reader.fieldnames and "lon" in reader.fieldnames,
                "monitor CSV must have 'lat' and 'lon' columns")
        for record in reader:
            out.append((float(record["lat"]), float(record["lon"])))
    require(len(out) >= 1, f"monitor CSV is empty: {path}")
    return np.asarray(out, dtype=np.float64)


def compare_to_monitors(sensors: SensorSet, monitors: np.ndarray,
                        grid: GridSpec) -> dict:
    """Nearest-grid-cell overlap statistics against external monitor locations.

    Each monitor is snapped to its nearest valid cell center; overlap counts
    monitors landing on a sensor cell. Distances are between monitor
    positions and the nearest sensor's cell center, in degrees (flat
    lat/lon metric).
    """
    require(sensors.count >= 1, "sensor set is empty")
    monitors = np.asarray(monitors, dtype=np.float64)
    require(monitors.ndim == 2 and monitors.shape[1] == 2 and monitors.shape[0] >= 1,
            "monitors must be an (m, 2) array of lat, lon")
    if grid.cell_size_deg is None:
        raise ValueError("grid lacks cell size in degrees; cannot place monitors on it")
    all_cells = np.arange(grid.n_valid)
    cell_lats, cell_lons = grid.cell_latlon(all_cells)
    sensor_lats, sensor_lons = grid.cell_latlon(sensors.pivots)

    nearest_cell = np.empty(monitors.shape[0], dtype=np.intp)
    nearest_sensor_dist = np.empty(monitors.shape[0])
    for i, (lat, lon) in enumerate(monitors):
        d2_cells = (cell_lats - lat) ** 2 + (cell_lons - lon) ** 2
        nearest_cell[i] = int(np.argmin(d2_cells))
        d2_sensors = (sensor_lats - lat) ** 2 + (sensor_lons - lon) ** 2
        nearest_sensor_dist[i] = float(np.sqrt(d2_sensors.min()))

    sensor_cells = set(int(p) for p in sensors.pivots)
    overlap = sum(1 for c in nearest_cell if int(c) in sensor_cells)
    return {
        "n_monitors": int(monitors.shape[0]),
        "n_sensors": int(sensors.count),
        "n_overlapping_cells": int(overlap),
        "overlap_fraction": overlap / monitors.shape[0],
        "mean_nearest_sensor_deg": float(nearest_sensor_dist.mean()),
        "median_nearest_sensor_deg": float(np.median(nearest_sensor_dist)),
    }


class QRPivotSelector(BaseEstimator):
    """Estimator wrapper: fit on a basis matrix, transform full fields to
    sensor rows.

    fit(X) expects the basis with rows as spatial cells and columns as
    modes; transform(X) keeps the pivot rows of a cells x time matrix.
    """

    def __init__(self, n_sensors=None):
        self.n_sensors = n_sensors

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        require(X.ndim == 2, "basis must be 2-D")
        pivots, scores = pivoted_qr(X.T, n_pivots=self.n_sensors)
        self.pivots_ = pivots
        self.scores_ = scores
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        require(hasattr(self, "pivots_"), "estimator is not fitted")
        X = np.asarray(X, dtype=np.float64)
        return X[self.pivots_, :]

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)
