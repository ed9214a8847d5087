"""Full-field reconstruction from sparse sensor measurements.

Sensor readings are mapped to library coefficients by a rank-revealing least
squares on the sensor rows of the basis, then expanded back to every cell.
Includes the desk-scale exhaustive placement oracle used to benchmark the
greedy pivots, and a seeded random-placement baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator

from .grid import SnapshotSeries
from .mrdmd import ModeLibrary
from .placement import SensorSet
from .validation import require

# singular values below this fraction of the largest are treated as zero
SOLVE_RCOND = 1e-10
# enumeration bounds for the exhaustive oracle
ORACLE_MAX_CELLS = 16
ORACLE_MAX_SENSORS = 4


def _as_basis(library) -> np.ndarray:
    if isinstance(library, ModeLibrary):
        return library.basis
    basis = np.asarray(library, dtype=np.float64)
    require(basis.ndim == 2, "basis must be 2-D")
    return basis


def _as_pivots(sensors) -> np.ndarray:
    if isinstance(sensors, SensorSet):
        return sensors.pivots
    return np.asarray(sensors, dtype=np.intp).ravel()


def _truncated_lstsq(A: np.ndarray, y: np.ndarray,
                     rcond: float = SOLVE_RCOND) -> np.ndarray:
    """Minimum-norm least squares through an explicit SVD with truncation."""
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((A.shape[1],) + y.shape[1:])
    keep = s > rcond * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    proj = U.conj().T @ y
    scaled = inv[:, None] * proj if proj.ndim == 2 else inv * proj
    return Vh.conj().T @ scaled


def sensor_condition_number(library, sensors) -> float:
    """2-norm condition number of the sensor-row submatrix; inf when rank-deficient."""
    basis = _as_basis(library)
    pivots = _as_pivots(sensors)
    sub = basis[pivots, :]
    s = np.linalg.svd(sub, compute_uv=False)
    if s.size == 0 or s[-1] <= SOLVE_RCOND * s[0]:
        return float("inf")
    return float(s[0] / s[-1])


def reconstruct_field(library, sensors, y, rcond: float = SOLVE_RCOND) -> np.ndarray:
    """Expand sensor measurements to the full field through the library.

    `y` holds one row per sensor (shape p or p x T). Fewer sensors than
    library columns is refused: the coefficient system would be
    underdetermined and regularization is out of scope. A rank-deficient
    sensor submatrix still solves, with small singular values truncated.
    """
    basis = _as_basis(library)
    pivots = _as_pivots(sensors)
    p = pivots.size
    r = basis.shape[1]
    require(p >= r,
            f"{p} sensors cannot determine {r} library coefficients; "
            f"needs at least one sensor per column")
    require(p == 0 or (pivots.min() >= 0 and pivots.max() < basis.shape[0]),
            "sensor index out of range for the basis")
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    require(y.shape[0] == p,
            f"measurements have {y.shape[0]} rows but there are {p} sensors")
    coeffs = _truncated_lstsq(basis[pivots, :], y, rcond=rcond)
    fields = basis @ coeffs
    return fields[:, 0] if squeeze else fields


@dataclass(frozen=True)
class ReconstructionReport:
    """Error metrics of a reconstruction against ground truth."""

    relative_frobenius: float
    per_snapshot_rmse: np.ndarray
    per_cell_rmse: np.ndarray
    condition_number: float

    def __post_init__(self):
        snap = np.asarray(self.per_snapshot_rmse, dtype=np.float64).ravel().copy()
        cell = np.asarray(self.per_cell_rmse, dtype=np.float64).ravel().copy()
        require(self.relative_frobenius >= 0, "relative error must be non-negative")
        require(bool((snap >= 0).all()) and bool((cell >= 0).all()),
                "RMSE values must be non-negative")
        snap.setflags(write=False)
        cell.setflags(write=False)
        object.__setattr__(self, "per_snapshot_rmse", snap)
        object.__setattr__(self, "per_cell_rmse", cell)

    def to_dict(self) -> dict:
        return {
            "relative_frobenius": self.relative_frobenius,
            "condition_number": (self.condition_number
                                 if np.isfinite(self.condition_number) else "inf"),
            "per_snapshot_rmse": [float(v) for v in self.per_snapshot_rmse],
            "per_cell_rmse": [float(v) for v in self.per_cell_rmse],
        }


def evaluate(truth, reconstructed, condition_number: float = float("nan")) -> ReconstructionReport:
    """Error report of reconstructed fields against the truth.

    `truth` is a SnapshotSeries (masked cells are already excluded from its
    values) or a plain matrix; `reconstructed` must match its shape.
    """
    values = truth.values if isinstance(truth, SnapshotSeries) else \
        np.asarray(truth, dtype=np.float64)
    recon = np.asarray(reconstructed, dtype=np.float64)
    require(values.ndim == 2, "truth must be 2-D (cells x snapshots)")
    require(recon.shape == values.shape,
            f"reconstruction shape {recon.shape} does not match truth {values.shape}")
    diff = recon - values
    truth_norm = np.linalg.norm(values)
    diff_norm = np.linalg.norm(diff)
    if diff_norm == 0.0:
        relative = 0.0
    elif truth_norm == 0.0:
        relative = float("inf")
    else:
        relative = float(diff_norm / truth_norm)
    return ReconstructionReport(
        relative_frobenius=relative,
        per_snapshot_rmse=np.sqrt(np.mean(diff ** 2, axis=0)),
        per_cell_rmse=np.sqrt(np.mean(diff ** 2, axis=1)),
        condition_number=condition_number,
    )


def reconstruct_and_evaluate(library, sensors, truth,
                             rcond: float = SOLVE_RCOND) -> tuple[np.ndarray, ReconstructionReport]:
    """Reconstruct the truth from its own sensor readings and score it."""
    values = truth.values if isinstance(truth, SnapshotSeries) else \
        np.asarray(truth, dtype=np.float64)
    pivots = _as_pivots(sensors)
    fields = reconstruct_field(library, sensors, values[pivots, :], rcond=rcond)
    report = evaluate(values, fields,
                      condition_number=sensor_condition_number(library, sensors))
    return fields, report


@dataclass(frozen=True)
class OracleResult:
    """Exhaustive-search winners over all sensor subsets of a given size."""

    best_condition_subset: tuple
    best_condition_value: float
    best_error_subset: tuple | None
    best_error_value: float | None
    n_subsets: int


def exhaustive_oracle(basis, p: int, test_set=None) -> OracleResult:
    """Enumerate every C(n, p) sensor subset of a small basis.

    Returns the subset minimizing the condition number of the selected-rows
    submatrix and, when a test set (n x T matrix of fields to reconstruct)
    is supplied, the subset minimizing relative Frobenius reconstruction
    error on it. Ties resolve to the lexicographically smallest subset.
    """
    basis = _as_basis(basis)
    n = basis.shape[0]
    require(n <= ORACLE_MAX_CELLS,
            f"oracle enumeration is bounded to {ORACLE_MAX_CELLS} cells, got {n}")
    require(1 <= p <= ORACLE_MAX_SENSORS,
            f"oracle sensor count must lie in [1, {ORACLE_MAX_SENSORS}], got {p}")
    require(p <= n, f"cannot choose {p} sensors among {n} cells")
    if test_set is not None:
        test_set = np.asarray(test_set, dtype=np.float64)
        require(test_set.ndim == 2 and test_set.shape[0] == n,
                "test set must be an n x T matrix over the same cells")
        test_norm = np.linalg.norm(test_set)
        require(test_norm > 0, "test set is identically zero")

    best_cond = np.inf
    best_cond_subset = None
    best_err = np.inf
    best_err_subset = None
    count = 0
    for subset in combinations(range(n), p):
        count += 1
        sub = basis[list(subset), :]
        s = np.linalg.svd(sub, compute_uv=False)
        cond = np.inf if s[-1] <= 0 else float(s[0] / s[-1])
        if cond < best_cond:
            best_cond = cond
            best_cond_subset = subset
        if test_set is not None:
            coeffs = _truncated_lstsq(sub, test_set[list(subset), :])
            err = float(np.linalg.norm(basis @ coeffs - test_set) / test_norm)
            if err < best_err:
                best_err = err
                best_err_subset = subset

    return OracleResult(
        best_condition_subset=tuple(best_cond_subset),
        best_condition_value=float(best_cond),
        best_error_subset=None if test_set is None else tuple(best_err_subset),
        best_error_value=None if test_set is None else best_err,
        n_subsets=count,
    )


def subset_reconstruction_error(basis, subset, test_set) -> float:
    """Relative Frobenius error when reconstructing the test set from `subset` rows."""
    basis = _as_basis(basis)
    subset = np.asarray(subset, dtype=np.intp).ravel()
    test_set = np.asarray(test_set, dtype=np.float64)
    coeffs = _truncated_lstsq(basis[subset, :], test_set[subset, :])
    denom = np.linalg.norm(test_set)
    require(denom > 0, "test set is identically zero")
    return float(np.linalg.norm(basis @ coeffs - test_set) / denom)


def random_baseline(library, truth, count: int, n_trials: int = 30,
                    seed: int = 0) -> np.ndarray:
    """Relative errors of `n_trials` uniform-random sensor sets of size `count`.

    The full error distribution is returned (not just a summary) so the
    comparison against the pivot placement stays reviewable.
    """
    basis = _as_basis(library)
    values = truth.values if isinstance(truth, SnapshotSeries) else \
        np.asarray(truth, dtype=np.float64)
    require(values.shape[0] == basis.shape[0],
            "truth and basis cover different numbers of cells")
    require(n_trials >= 1, "need at least one trial")
    require(1 <= count <= basis.shape[0], "sensor count out of range")
    rng = np.random.default_rng(seed)
    errors = np.empty(n_trials)
    for trial in range(n_trials):
        cells = rng.choice(basis.shape[0], size=count, replace=False)
        coeffs = _truncated_lstsq(basis[cells, :], values[cells, :])
        denom = np.linalg.norm(values)
        errors[trial] = np.inf if denom == 0 else \
            float(np.linalg.norm(basis @ coeffs - values) / denom)
    return errors


class FieldReconstructor(BaseEstimator):
    """Estimator wrapper: bind a library and sensor set, then map readings
    to full fields.

    fit(library, sensors) accepts a ModeLibrary (or raw basis) and a
    SensorSet (or index array); predict(y) expands p-row measurements.
    """

    def __init__(self, rcond=SOLVE_RCOND):
        self.rcond = rcond

    def fit(self, X, y=None):
        """X is the library/basis; y the sensor set/pivot indices."""
        require(y is not None, "fit requires the sensor set as the second argument")
        self.basis_ = _as_basis(X)
        self.pivots_ = _as_pivots(y)
        require(self.pivots_.size >= self.basis_.shape[1],
                f"{self.pivots_.size} sensors cannot determine "
                f"{self.basis_.shape[1]} library coefficients")
        self.condition_number_ = sensor_condition_number(self.basis_, self.pivots_)
        return self

    def predict(self, y) -> np.ndarray:
        require(hasattr(self, "basis_"), "estimator is not fitted")
        return reconstruct_field(self.basis_, self.pivots_, y, rcond=self.rcond)

    def score(self, X, y=None) -> float:
        """Negative relative error reconstructing fields X from their own sensor rows."""
        require(hasattr(self, "basis_"), "estimator is not fitted")
        X = np.asarray(X, dtype=np.float64)
        fields = self.predict(X[self.pivots_, :])
        denom = np.linalg.norm(X)
        if denom == 0:
            return 0.0
        return -float(np.linalg.norm(fields - X) / denom)
