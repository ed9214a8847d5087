"""Exact dynamic mode decomposition of snapshot matrices.

Fits the best linear one-step propagator in a truncated SVD subspace and
exposes its eigenstructure: spatial modes, discrete/continuous eigenvalues
and initial amplitudes. All functions are pure; `ExactDMD` wraps them in an
estimator interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .fileio import atomic_write_bytes, atomic_write_json
from .validation import require

# relative floor under which singular values are treated as exact zeros
SINGULAR_VALUE_FLOOR = 1e-12

DEFAULT_ENERGY = 0.99


@dataclass(frozen=True)
class DmdResult:
    """Modal expansion x(t) ~ sum_k b_k psi_k exp(omega_k t).

    modes: (n, r) complex, unit-norm columns. eigenvalues: discrete-time,
    one step = dt_days. amplitudes: coefficients against the first snapshot.
    singular_values: the r retained singular values of the first snapshot
    block. Complex eigenvalues of real data come in conjugate pairs with
    conjugate modes and amplitudes.
    """

    modes: np.ndarray
    eigenvalues: np.ndarray
    amplitudes: np.ndarray
    singular_values: np.ndarray
    dt_days: float = 1.0

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.complex128)
        require(modes.ndim == 2, "modes must be a 2-D matrix")
        r = modes.shape[1]
        eigs = np.asarray(self.eigenvalues, dtype=np.complex128).ravel()
        amps = np.asarray(self.amplitudes, dtype=np.complex128).ravel()
        svals = np.asarray(self.singular_values, dtype=np.float64).ravel()
        require(eigs.size == r and amps.size == r and svals.size == r,
                "eigenvalues, amplitudes and singular_values must all have length r")
        require(bool((svals >= 0).all()), "singular values must be non-negative")
        require(bool((np.diff(svals) <= 0).all()), "singular values must be non-increasing")
        norms = np.linalg.norm(modes, axis=0)
        require(bool(np.allclose(norms, 1.0, atol=1e-6)), "mode columns must have unit 2-norm")
        require(self.dt_days > 0, "dt_days must be positive")
        for name, arr in (("modes", modes), ("eigenvalues", eigs),
                          ("amplitudes", amps), ("singular_values", svals)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    @property
    def n_cells(self) -> int:
        return self.modes.shape[0]

    @property
    def omega(self) -> np.ndarray:
        """Continuous-time exponents per day, principal branch of ln(lambda)/dt."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self.eigenvalues) / self.dt_days

    def frequency_cycles_per_day(self) -> np.ndarray:
        return np.abs(self.omega.imag) / (2.0 * np.pi)

    def restrict(self, keep) -> "DmdResult":
        """Sub-expansion holding only the selected modes (possibly none).

        Selection is a set: indices are applied in ascending order so the
        stored mode order is preserved.
        """
        keep = np.asarray(keep)
        if keep.dtype == bool:
            require(keep.size == self.rank, "boolean selector length must equal rank")
            keep = np.flatnonzero(keep)
        else:
            keep = np.unique(keep.astype(np.intp))
            require(keep.size == 0 or (keep.min() >= 0 and keep.max() < self.rank),
                    "mode index out of range")
        return DmdResult(
            modes=self.modes[:, keep],
            eigenvalues=self.eigenvalues[keep],
            amplitudes=self.amplitudes[keep],
            singular_values=self.singular_values[keep],
            dt_days=self.dt_days,
        )


def resolve_rank(singular_values, rank: int | None = None,
                 energy: float = DEFAULT_ENERGY, max_rank: int | None = None) -> int:
    """Number of modes to retain given the singular spectrum.

    Values below SINGULAR_VALUE_FLOOR * sigma_1 are never retained. A fixed
    `rank` wins over the cumulative squared-energy fraction `energy`;
    `max_rank` caps either. May return 0 (caller decides whether that is an
    error).
    """
    s = np.asarray(singular_values, dtype=np.float64).ravel()
    usable = 0 if s.size == 0 or s[0] <= 0 else int((s > SINGULAR_VALUE_FLOOR * s[0]).sum())
    if rank is not None:
        require(rank >= 1, f"fixed rank must be >= 1, got {rank}")
        r = min(int(rank), usable)
    else:
        require(0 < energy <= 1, f"energy fraction must lie in (0, 1], got {energy}")
        if usable == 0:
            r = 0
        else:
            frac = np.cumsum(s[:usable] ** 2) / np.sum(s[:usable] ** 2)
            r = int(np.searchsorted(frac, energy - 1e-14) + 1)
            r = min(r, usable)
    if max_rank is not None:
        require(max_rank >= 1, f"max_rank must be >= 1, got {max_rank}")
        r = min(r, int(max_rank))
    return r


def _canonical_phase(modes: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real positive.

    Conjugate mode pairs share entry magnitudes, so their rotations are
    conjugate and pairing survives.
    """
    if modes.shape[1] == 0:
        return modes
    idx = np.argmax(np.abs(modes), axis=0)
    lead = modes[idx, np.arange(modes.shape[1])]
    mag = np.abs(lead)
    phase = np.where(mag > 0, lead / np.where(mag > 0, mag, 1.0), 1.0)
    return modes * phase.conj()


def _canonical_order(eigenvalues, amplitudes) -> np.ndarray:
    """Deterministic mode order: descending |amplitude|, then eigenvalue."""
    return np.lexsort((-eigenvalues.imag, -eigenvalues.real, -np.abs(amplitudes)))


def compute_dmd(X, dt_days: float = 1.0, rank: int | None = None,
                energy: float = DEFAULT_ENERGY, max_rank: int | None = None) -> DmdResult:
    """Exact DMD of an n x m snapshot matrix (columns are time steps).

    Pipeline: truncated SVD of X[:, :-1], best-fit propagator in that
    subspace, eigendecomposition, modes lifted through the second snapshot
    block and unit-normalized, amplitudes by least squares against the first
    snapshot. Raises when the resolved rank is 0 (e.g. zero matrix).
    """
    X = np.asarray(X, dtype=np.float64)
    require(X.ndim == 2, f"X must be 2-D, got ndim={X.ndim}")
    n, m = X.shape
    require(m >= 2, f"need at least 2 snapshots, got {m}")
    require(bool(np.isfinite(X).all()), "X contains non-finite entries")
    require(dt_days > 0, "dt_days must be positive")

    X1 = X[:, :-1]
    X2 = X[:, 1:]
    U, s, Vh = np.linalg.svd(X1, full_matrices=False)
    r = resolve_rank(s, rank=rank, energy=energy, max_rank=max_rank)
    if r == 0:
        raise ValueError("rank policy resolved to 0 modes (input has no usable "
                         "singular values); nothing to decompose")
    U = U[:, :r]
    s_r = s[:r]
    V = Vh[:r].conj().T

    lift = X2 @ (V / s_r)           # X2 V Sigma^-1, reused for modes
    atilde = U.conj().T @ lift
    eigvals, W = np.linalg.eig(atilde)
    eigvals = eigvals.astype(np.complex128)

    modes = lift.astype(np.complex128) @ W
    norms = np.linalg.norm(modes, axis=0)
    # a zero eigenvalue can null the lifted column; fall back to the subspace vector
    weak = norms < SINGULAR_VALUE_FLOOR * max(norms.max(), 1.0)
    if weak.any():
        fallback = U.astype(np.complex128) @ W[:, weak]
        modes[:, weak] = fallback
        norms = np.linalg.norm(modes, axis=0)
    modes = _canonical_phase(modes / norms)

    amplitudes, *_ = np.linalg.lstsq(modes, X[:, 0].astype(np.complex128), rcond=None)
    order = _canonical_order(eigvals, amplitudes)
    # singular values describe the retained subspace, not individual modes;
    # they stay in their natural non-increasing order
    return DmdResult(
        modes=modes[:, order],
        eigenvalues=eigvals[order],
        amplitudes=amplitudes[order],
        singular_values=s_r,
        dt_days=dt_days,
    )


def dmd_reconstruct(result: DmdResult, times) -> np.ndarray:
    """Evaluate the modal expansion at day offsets; returns a real n x T matrix.

    Uses lambda**(t/dt) (principal branch), which keeps t=0 exact even for
    zero eigenvalues.
    """
    times = np.asarray(times, dtype=np.float64).ravel()
    if result.rank == 0 or times.size == 0:
        return np.zeros((result.n_cells, times.size))
    exponents = times / result.dt_days
    with np.errstate(divide="ignore", invalid="ignore"):
        dynamics = result.eigenvalues[:, None] ** exponents[None, :]
    combined = result.modes @ (result.amplitudes[:, None] * dynamics)
    return combined.real


def conjugate_pair_map(eigenvalues, tol: float = 1e-9) -> np.ndarray:
    """Index of each eigenvalue's conjugate partner (own index when real).

    Returns -1 where no partner exists within `tol`; real data should never
    produce that.
    """
    eigs = np.asarray(eigenvalues, dtype=np.complex128).ravel()
    partner = np.full(eigs.size, -1, dtype=np.intp)
    scale = max(np.abs(eigs).max(), 1.0) if eigs.size else 1.0
    used = np.zeros(eigs.size, dtype=bool)
    for i, lam in enumerate(eigs):
        if partner[i] != -1:
            continue
        if abs(lam.imag) <= tol * scale:
            partner[i] = i
            used[i] = True
            continue
        gaps = np.abs(eigs - lam.conj())
        gaps[used] = np.inf
        gaps[i] = np.inf
        j = int(np.argmin(gaps))
        if np.isfinite(gaps[j]) and gaps[j] <= tol * scale:
            partner[i] = j
            partner[j] = i
            used[i] = used[j] = True
    return partner


def save_dmd(result: DmdResult, out_dir: str | Path, stem: str = "dmd") -> Path:
    """Write header JSON + binary mode payload; returns the header path.

    Payload layout: little-endian f64, column-major, all real parts then all
    imaginary parts.
    """
    out_dir = Path(out_dir)
    payload_name = f"{stem}_modes.bin"
    real = np.asarray(result.modes.real, dtype="<f8").tobytes(order="F")
    imag = np.asarray(result.modes.imag, dtype="<f8").tobytes(order="F")
    atomic_write_bytes(out_dir / payload_name, real + imag)
    header = {
        "rank": result.rank,
        "n_cells": result.n_cells,
        "dt_days": result.dt_days,
        "eigenvalues": [[float(v.real), float(v.imag)] for v in result.eigenvalues],
        "amplitudes": [[float(v.real), float(v.imag)] for v in result.amplitudes],
        "singular_values": [float(v) for v in result.singular_values],
        "payload_file": payload_name,
    }
    header_path = out_dir / f"{stem}.json"
    atomic_write_json(header_path, header)
    return header_path


def load_dmd(header_path: str | Path) -> DmdResult:
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"result header not found: {header_path}")
    header = json.loads(header_path.read_text())
    n = int(header["n_cells"])
    r = int(header["rank"])
    payload_path = header_path.parent / header["payload_file"]
    if not payload_path.exists():
        raise FileNotFoundError(f"mode payload not found: {payload_path}")
    raw = np.fromfile(payload_path, dtype="<f8")
    if raw.size != 2 * n * r:
        raise ValueError(f"mode payload holds {raw.size} values, expected {2 * n * r}")
    real = raw[: n * r].reshape((n, r), order="F")
    imag = raw[n * r:].reshape((n, r), order="F")
    return DmdResult(
        modes=real + 1j * imag,
        eigenvalues=[complex(re, im) for re, im in header["eigenvalues"]],
        amplitudes=[complex(re, im) for re, im in header["amplitudes"]],
        singular_values=header["singular_values"],
        dt_days=float(header["dt_days"]),
    )


class ExactDMD(BaseEstimator):
    """Estimator wrapper around :func:`compute_dmd`.

    fit(X) expects X laid out like the rest of the package: rows are spatial
    cells, columns are snapshots in time order.
    """

    def __init__(self, rank=None, energy=DEFAULT_ENERGY, max_rank=None, dt_days=1.0):
        self.rank = rank
        self.energy = energy
        self.max_rank = max_rank
        self.dt_days = dt_days

    def fit(self, X, y=None):
        result = compute_dmd(X, dt_days=self.dt_days, rank=self.rank,
                             energy=self.energy, max_rank=self.max_rank)
        self.result_ = result
        self.modes_ = result.modes
        self.eigenvalues_ = result.eigenvalues
        self.amplitudes_ = result.amplitudes
        self.omega_ = result.omega
        self.rank_ = result.rank
        self.singular_values_ = result.singular_values
        return self

    def predict(self, times) -> np.ndarray:
        require(hasattr(self, "result_"), "estimator is not fitted")
        return dmd_reconstruct(self.result_, times)

    def reconstruct(self, times) -> np.ndarray:
        return self.predict(times)

    def score(self, X, y=None) -> float:
        """Negative relative Frobenius reconstruction error on X's time span."""
        X = np.asarray(X, dtype=np.float64)
        times = np.arange(X.shape[1]) * self.dt_days
        approx = self.predict(times)
        denom = np.linalg.norm(X)
        if denom == 0:
            return 0.0
        return -float(np.linalg.norm(approx - X) / denom)
