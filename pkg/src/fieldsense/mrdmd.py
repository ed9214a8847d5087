"""Multiresolution decomposition over a dyadic tree of time windows.

Each node runs a DMD on its window of the residual data, keeps the modes slow
enough for that window length, and hands the fast remainder to its two
half-window children. Slow modes collected across the tree form a tailored
basis library for sensor placement and reconstruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .dmd import DmdResult, compute_dmd, conjugate_pair_map, dmd_reconstruct
from .fileio import atomic_write_bytes, atomic_write_json
from .grid import SnapshotSeries
from .validation import require

DEFAULT_RHO = 1.0
DEFAULT_TOLERANCE = 1e-2
# below this relative Frobenius norm a residual is not worth recursing into
RESIDUAL_STOP = 1e-10
# DMD needs m >= 2 and conjugate pairs need headroom
MIN_WINDOW_SNAPSHOTS = 4
# imaginary parts below this norm do not get their own library column
IMAG_COLUMN_FLOOR = 1e-12


def classify_slow(omega, window_days, rho: float = DEFAULT_RHO):
    """True iff a mode completes at most `rho` oscillation cycles per window.

    The criterion is |Im(omega)| / (2*pi) * window_days <= rho. Accepts a
    scalar or an array of continuous-time exponents.
    """
    require(window_days >= 1, f"window_days must be >= 1, got {window_days}")
    require(rho >= 0, f"rho must be non-negative, got {rho}")
    omega_arr = np.asarray(omega, dtype=np.complex128)
    cycles = np.abs(omega_arr.imag) / (2.0 * np.pi) * window_days
    slow = cycles <= rho
    if omega_arr.ndim == 0:
        return bool(slow)
    return slow


def significance_test(amplitude: float, spatial_norm: float,
                      background_amplitude: float, tolerance: float) -> bool:
    """True iff the mode's contribution norm exceeds tolerance x background.

    The contribution norm is |b_k| * ||psi_k||; the background amplitude is
    the full-window (level-0) slow reconstruction's column norm evaluated on
    the mode's own window. Zero-amplitude modes are never significant.
    """
    require(tolerance > 0, f"tolerance must be positive, got {tolerance}")
    return float(amplitude) * float(spatial_norm) > tolerance * float(background_amplitude)


@dataclass(frozen=True)
class MrdmdNode:
    """One window of the decomposition tree.

    `slow` holds only the modes removed at this node (the slow set); fast
    content was passed on to children. `significant` flags each slow mode;
    level-0 modes are significant by convention.
    """

    level: int
    bin_index: int
    i_start: int
    i_end: int
    dt_days: float
    slow: DmdResult
    significant: np.ndarray
    background_amplitude: float

    def __post_init__(self):
        require(self.level >= 0, "level must be non-negative")
        require(0 <= self.bin_index < 2 ** self.level,
                f"bin_index {self.bin_index} out of range for level {self.level}")
        require(0 <= self.i_start < self.i_end, "window must be non-empty")
        flags = np.asarray(self.significant, dtype=bool).ravel().copy()
        require(flags.size == self.slow.rank,
                "significance flags must match the slow mode count")
        flags.setflags(write=False)
        object.__setattr__(self, "significant", flags)

    @property
    def n_slow(self) -> int:
        return self.slow.rank

    @property
    def n_snapshots(self) -> int:
        return self.i_end - self.i_start

    @property
    def t_start(self) -> float:
        return self.i_start * self.dt_days

    @property
    def t_end(self) -> float:
        return self.i_end * self.dt_days

    @property
    def window_days(self) -> float:
        return self.n_snapshots * self.dt_days

    def reconstruct(self) -> np.ndarray:
        """Slow-mode reconstruction over this node's own window."""
        local_times = np.arange(self.n_snapshots) * self.dt_days
        return dmd_reconstruct(self.slow, local_times)


@dataclass(frozen=True)
class MrdmdTree:
    """All computed nodes, breadth-first by (level, bin_index).

    `terminal_residual` is the part of the input never captured by any node
    (fast content at windows where recursion stopped); it is kept in memory
    for reconstruction checks but never serialized.
    """

    nodes: tuple
    n_cells: int
    n_snapshots: int
    dt_days: float
    start_date: np.datetime64
    rho: float
    tolerance: float
    max_level: int
    terminal_residual: np.ndarray | None = None

    def __post_init__(self):
        nodes = tuple(self.nodes)
        require(len(nodes) >= 1, "tree must contain at least the root node")
        keys = [(node.level, node.bin_index) for node in nodes]
        require(keys == sorted(keys), "nodes must be ordered by (level, bin_index)")
        require(keys[0] == (0, 0), "tree must start at the level-0 root")
        require(len(set(keys)) == len(keys), "duplicate (level, bin_index) node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "start_date", np.datetime64(self.start_date, "D"))
        if self.terminal_residual is not None:
            resid = np.asarray(self.terminal_residual, dtype=np.float64)
            require(resid.shape == (self.n_cells, self.n_snapshots),
                    "terminal_residual shape must match the input window")
            resid = resid.copy()
            resid.setflags(write=False)
            object.__setattr__(self, "terminal_residual", resid)

    @property
    def root(self) -> MrdmdNode:
        return self.nodes[0]

    @property
    def n_levels(self) -> int:
        return max(node.level for node in self.nodes) + 1

    def node_at(self, level: int, bin_index: int) -> MrdmdNode:
        for node in self.nodes:
            if node.level == level and node.bin_index == bin_index:
                return node
        raise KeyError(f"no node at level {level}, bin {bin_index}")

    def nodes_at_level(self, level: int) -> list:
        return [node for node in self.nodes if node.level == level]


def _empty_result(n_cells: int, dt_days: float) -> DmdResult:
    return DmdResult(modes=np.zeros((n_cells, 0), dtype=np.complex128),
                     eigenvalues=[], amplitudes=[], singular_values=[],
                     dt_days=dt_days)


def _representative_mask(result: DmdResult) -> np.ndarray:
    """Keep one member per conjugate pair: the non-negative-imag eigenvalue."""
    keep = np.ones(result.rank, dtype=bool)
    partner = conjugate_pair_map(result.eigenvalues)
    for i in range(result.rank):
        j = partner[i]
        if j != -1 and j != i and result.eigenvalues[i].imag < 0:
            keep[i] = False
    return keep


def decompose(series, max_level: int, rho: float = DEFAULT_RHO,
              tolerance: float = DEFAULT_TOLERANCE, rank: int | None = None,
              energy: float = 0.99, max_rank: int | None = None,
              dt_days: float | None = None, start_date=None,
              keep_residual: bool = True) -> MrdmdTree:
    """Build the dyadic window tree for a snapshot series (or raw n x m matrix).

    At each node the incoming residual is decomposed, modes passing the
    rho-cycles-per-window rule are retained, and the fast remainder is split
    between the two half windows. Recursion into a half stops at `max_level`,
    below MIN_WINDOW_SNAPSHOTS, or when the residual's Frobenius norm falls
    under RESIDUAL_STOP relative to the input data on that half.
    """
    if isinstance(series, SnapshotSeries):
        X = np.asarray(series.values, dtype=np.float64)
        dt = series.dt_days if dt_days is None else float(dt_days)
        date0 = series.start_date if start_date is None else np.datetime64(start_date, "D")
    else:
        X = np.asarray(series, dtype=np.float64)
        dt = 1.0 if dt_days is None else float(dt_days)
        date0 = np.datetime64("2000-01-01" if start_date is None else start_date, "D")
    require(X.ndim == 2, f"snapshot matrix must be 2-D, got ndim={X.ndim}")
    n, m = X.shape
    require(m >= 2, f"need at least 2 snapshots, got {m}")
    require(max_level >= 0, f"max_level must be non-negative, got {max_level}")
    require(np.linalg.norm(X) > 0, "input is identically zero; nothing to decompose")
    require(tolerance > 0, f"tolerance must be positive, got {tolerance}")

    raw_nodes = []
    terminal = np.zeros_like(X)

    def recurse(level: int, bin_index: int, i0: int, i1: int, data: np.ndarray):
        if np.linalg.norm(data[:, :-1]) == 0:
            # nothing for a propagator fit to latch onto; retain no modes here
            slow = _empty_result(n, dt)
            fast = data
        else:
            result = compute_dmd(data, dt_days=dt, rank=rank, energy=energy,
                                 max_rank=max_rank)
            slow_mask = np.asarray(classify_slow(result.omega, (i1 - i0) * dt, rho))
            slow = result.restrict(slow_mask)
            fast = data - dmd_reconstruct(slow, np.arange(i1 - i0) * dt)
        raw_nodes.append((level, bin_index, i0, i1, slow))
        mid = i0 + (i1 - i0) // 2
        for child_bin, c0, c1 in ((2 * bin_index, i0, mid), (2 * bin_index + 1, mid, i1)):
            if level + 1 > max_level or c1 - c0 < MIN_WINDOW_SNAPSHOTS:
                terminal[:, c0:c1] += fast[:, c0 - i0:c1 - i0]
                continue
            piece = fast[:, c0 - i0:c1 - i0]
            piece_norm = np.linalg.norm(piece)
            if piece_norm == 0 or piece_norm < RESIDUAL_STOP * np.linalg.norm(X[:, c0:c1]):
                terminal[:, c0:c1] += piece
                continue
            recurse(level + 1, child_bin, c0, c1, piece)

    recurse(0, 0, 0, m, X)
    raw_nodes.sort(key=lambda item: (item[0], item[1]))

    root_slow = raw_nodes[0][4]
    nodes = []
    for level, bin_index, i0, i1, slow in raw_nodes:
        t_mid = 0.5 * (i0 + i1) * dt
        background = float(np.linalg.norm(dmd_reconstruct(root_slow, [t_mid])))
        if level == 0:
            flags = np.ones(slow.rank, dtype=bool)
        else:
            flags = np.array([
                significance_test(abs(slow.amplitudes[k]), 1.0, background, tolerance)
                for k in range(slow.rank)
            ], dtype=bool)
        nodes.append(MrdmdNode(level=level, bin_index=bin_index, i_start=i0,
                               i_end=i1, dt_days=dt, slow=slow,
                               significant=flags, background_amplitude=background))

    return MrdmdTree(
        nodes=tuple(nodes), n_cells=n, n_snapshots=m, dt_days=dt,
        start_date=date0, rho=rho, tolerance=tolerance, max_level=max_level,
        terminal_residual=terminal if keep_residual else None,
    )


def apply_tolerance(tree: MrdmdTree, tolerance: float) -> MrdmdTree:
    """Re-flag significance at a new tolerance without re-decomposing."""
    require(tolerance > 0, f"tolerance must be positive, got {tolerance}")
    nodes = []
    for node in tree.nodes:
        if node.level == 0:
            flags = np.ones(node.n_slow, dtype=bool)
        else:
            flags = np.array([
                significance_test(abs(node.slow.amplitudes[k]), 1.0,
                                  node.background_amplitude, tolerance)
                for k in range(node.n_slow)
            ], dtype=bool)
        nodes.append(MrdmdNode(level=node.level, bin_index=node.bin_index,
                               i_start=node.i_start, i_end=node.i_end,
                               dt_days=node.dt_days, slow=node.slow,
                               significant=flags,
                               background_amplitude=node.background_amplitude))
    return MrdmdTree(nodes=tuple(nodes), n_cells=tree.n_cells,
                     n_snapshots=tree.n_snapshots, dt_days=tree.dt_days,
                     start_date=tree.start_date, rho=tree.rho,
                     tolerance=tolerance, max_level=tree.max_level,
                     terminal_residual=tree.terminal_residual)


def reconstruct_series(tree: MrdmdTree, include_residual: bool = False) -> np.ndarray:
    """Sum of every node's slow reconstruction over its own window.

    With `include_residual` the stored terminal residual is added back, which
    recovers the input exactly up to floating-point drift.
    """
    out = np.zeros((tree.n_cells, tree.n_snapshots))
    for node in tree.nodes:
        out[:, node.i_start:node.i_end] += node.reconstruct()
    if include_residual:
        require(tree.terminal_residual is not None,
                "tree was built without keep_residual; no terminal residual stored")
        out += tree.terminal_residual
    return out


@dataclass(frozen=True)
class LibraryColumn:
    """Provenance of one real basis column."""

    level: int
    bin_index: int
    t_start: float
    t_end: float
    eigenvalue: complex
    amplitude: float
    significant: bool
    part: str  # "real" or "imag"

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "bin_index": self.bin_index,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "eigenvalue": [self.eigenvalue.real, self.eigenvalue.imag],
            "amplitude": self.amplitude,
            "significant": self.significant,
            "part": self.part,
        }

    @classmethod
    def from_dict(cls, info: dict) -> "LibraryColumn":
        return cls(
            level=int(info["level"]), bin_index=int(info["bin_index"]),
            t_start=float(info["t_start"]), t_end=float(info["t_end"]),
            eigenvalue=complex(info["eigenvalue"][0], info["eigenvalue"][1]),
            amplitude=float(info["amplitude"]),
            significant=bool(info["significant"]), part=str(info["part"]),
        )


@dataclass(frozen=True)
class ModeLibrary:
    """Real basis matrix with per-column provenance.

    Each retained complex mode contributes its real part and, when not purely
    real, its imaginary part as separate unit-normalized columns.
    """

    basis: np.ndarray
    provenance: tuple

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        require(basis.ndim == 2, "basis must be 2-D")
        require(len(self.provenance) == basis.shape[1],
                "provenance length must equal the column count")
        require(basis.shape[1] >= 1, "library must have at least one column")
        norms = np.linalg.norm(basis, axis=0)
        require(bool(np.allclose(norms, 1.0, atol=1e-6)),
                "basis columns must be unit-normalized")
        basis = basis.copy()
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def n_cells(self) -> int:
        return self.basis.shape[0]

    @property
    def n_columns(self) -> int:
        return self.basis.shape[1]


def build_library(tree: MrdmdTree, include: str = "all") -> ModeLibrary:
    """Concatenate retained slow modes into a real basis.

    Column order is breadth-first by (level, bin_index), then descending
    amplitude magnitude within a node. Conjugate pairs contribute a single
    representative (non-negative imaginary eigenvalue). `include` is "all" or
    "significant".
    """
    require(include in ("all", "significant", "significant_only"),
            f"include must be 'all' or 'significant', got {include!r}")
    only_significant = include != "all"
    columns = []
    provenance = []
    for node in tree.nodes:
        slow = node.slow
        if slow.rank == 0:
            continue
        representative = _representative_mask(slow)
        for k in range(slow.rank):
            if not representative[k]:
                continue
            if only_significant and not node.significant[k]:
                continue
            mode = slow.modes[:, k]
            info = dict(level=node.level, bin_index=node.bin_index,
                        t_start=node.t_start, t_end=node.t_end,
                        eigenvalue=complex(slow.eigenvalues[k]),
                        amplitude=float(abs(slow.amplitudes[k])),
                        significant=bool(node.significant[k]))
            real_part = mode.real
            real_norm = np.linalg.norm(real_part)
            if real_norm > IMAG_COLUMN_FLOOR:
                columns.append(real_part / real_norm)
                provenance.append(LibraryColumn(part="real", **info))
            imag_part = mode.imag
            imag_norm = np.linalg.norm(imag_part)
            if imag_norm > IMAG_COLUMN_FLOOR:
                columns.append(imag_part / imag_norm)
                provenance.append(LibraryColumn(part="imag", **info))
    if not columns:
        raise ValueError(
            "empty library: no modes retained"
            + (" at the requested significance tolerance" if only_significant else ""))
    return ModeLibrary(basis=np.column_stack(columns), provenance=tuple(provenance))


def merge_libraries(first: ModeLibrary, second: ModeLibrary) -> ModeLibrary:
    """Column-wise concatenation (two-window scheme)."""
    require(first.n_cells == second.n_cells,
            "libraries cover different numbers of cells")
    return ModeLibrary(basis=np.hstack([first.basis, second.basis]),
                       provenance=first.provenance + second.provenance)


@dataclass(frozen=True)
class SignificanceCounts:
    by_bin: dict
    by_level: dict
    total: int


def count_significant_modes(tree: MrdmdTree) -> SignificanceCounts:
    """Significant mode counts per (level, bin) and in total.

    Conjugate pairs count once; the total excludes the level-0 background.
    """
    by_bin = {}
    by_level = {}
    total = 0
    for node in tree.nodes:
        representative = _representative_mask(node.slow)
        count = int(np.sum(node.significant & representative))
        by_bin[(node.level, node.bin_index)] = count
        by_level[node.level] = by_level.get(node.level, 0) + count
        if node.level > 0:
            total += count
    return SignificanceCounts(by_bin=by_bin, by_level=by_level, total=total)


def time_frequency_table(tree: MrdmdTree) -> list[dict]:
    """One row per node: level, bin, window dates, significant-mode count."""
    counts = count_significant_modes(tree).by_bin
    rows = []
    for node in tree.nodes:
        rows.append({
            "level": node.level,
            "bin": node.bin_index,
            "t_start": str(tree.start_date + np.timedelta64(int(round(node.t_start)), "D")),
            "t_end": str(tree.start_date + np.timedelta64(int(round(node.t_end)), "D")),
            "n_significant": counts[(node.level, node.bin_index)],
        })
    return rows


def time_frequency_csv(tree: MrdmdTree) -> str:
    lines = ["level,bin,t_start,t_end,n_significant"]
    for row in time_frequency_table(tree):
        lines.append(f"{row['level']},{row['bin']},{row['t_start']},"
                     f"{row['t_end']},{row['n_significant']}")
    return "\n".join(lines) + "\n"


def save_tree(tree: MrdmdTree, out_dir: str | Path, stem: str = "mrdmd") -> Path:
    """Write tree metadata JSON + one binary payload of all node mode matrices.

    Node payload blocks are little-endian f64, column-major, real parts then
    imaginary parts, at the byte offsets recorded in the header. The terminal
    residual is not serialized.
    """
    out_dir = Path(out_dir)
    payload_name = f"{stem}_modes.bin"
    blocks = []
    node_records = []
    offset = 0
    for node in tree.nodes:
        slow = node.slow
        block = (np.asarray(slow.modes.real, dtype="<f8").tobytes(order="F")
                 + np.asarray(slow.modes.imag, dtype="<f8").tobytes(order="F"))
        node_records.append({
            "level": node.level,
            "bin_index": node.bin_index,
            "i_start": node.i_start,
            "i_end": node.i_end,
            "n_slow": node.n_slow,
            "eigenvalues": [[v.real, v.imag] for v in node.slow.eigenvalues],
            "amplitudes": [[v.real, v.imag] for v in node.slow.amplitudes],
            "singular_values": [float(v) for v in node.slow.singular_values],
            "significant": [bool(v) for v in node.significant],
            "background_amplitude": node.background_amplitude,
            "payload_offset": offset,
        })
        blocks.append(block)
        offset += len(block)
    atomic_write_bytes(out_dir / payload_name, b"".join(blocks))
    header = {
        "n_cells": tree.n_cells,
        "n_snapshots": tree.n_snapshots,
        "dt_days": tree.dt_days,
        "start_date": str(tree.start_date),
        "rho": tree.rho,
        "tolerance": tree.tolerance,
        "max_level": tree.max_level,
        "payload_file": payload_name,
        "nodes": node_records,
    }
    header_path = out_dir / f"{stem}.json"
    atomic_write_json(header_path, header)
    return header_path


def load_tree(header_path: str | Path) -> MrdmdTree:
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"tree header not found: {header_path}")
    header = json.loads(header_path.read_text())
    payload_path = header_path.parent / header["payload_file"]
    if not payload_path.exists():
        raise FileNotFoundError(f"tree mode payload not found: {payload_path}")
    raw = payload_path.read_bytes()
    n = int(header["n_cells"])
    dt = float(header["dt_days"])
    nodes = []
    for record in header["nodes"]:
        r = int(record["n_slow"])
        offset = int(record["payload_offset"])
        span = n * r * 8
        if offset + 2 * span > len(raw):
            raise ValueError("tree mode payload is shorter than the header implies")
        real = np.frombuffer(raw, dtype="<f8", count=n * r, offset=offset)
        imag = np.frombuffer(raw, dtype="<f8", count=n * r, offset=offset + span)
        modes = (real.reshape((n, r), order="F")
                 + 1j * imag.reshape((n, r), order="F"))
        slow = DmdResult(
            modes=modes,
            eigenvalues=[complex(re, im) for re, im in record["eigenvalues"]],
            amplitudes=[complex(re, im) for re, im in record["amplitudes"]],
            singular_values=record["singular_values"],
            dt_days=dt,
        )
        nodes.append(MrdmdNode(
            level=int(record["level"]), bin_index=int(record["bin_index"]),
            i_start=int(record["i_start"]), i_end=int(record["i_end"]),
            dt_days=dt, slow=slow,
            significant=np.asarray(record["significant"], dtype=bool),
            background_amplitude=float(record["background_amplitude"]),
        ))
    return MrdmdTree(
        nodes=tuple(nodes), n_cells=n, n_snapshots=int(header["n_snapshots"]),
        dt_days=dt, start_date=np.datetime64(header["start_date"], "D"),
        rho=float(header["rho"]), tolerance=float(header["tolerance"]),
        max_level=int(header["max_level"]), terminal_residual=None,
    )


def save_library(library: ModeLibrary, out_dir: str | Path,
                 stem: str = "library") -> Path:
    """Write library header JSON + binary basis payload (f64 column-major)."""
    out_dir = Path(out_dir)
    payload_name = f"{stem}_basis.bin"
    atomic_write_bytes(out_dir / payload_name,
                       np.asarray(library.basis, dtype="<f8").tobytes(order="F"))
    header = {
        "n_cells": library.n_cells,
        "n_columns": library.n_columns,
        "payload_file": payload_name,
        "provenance": [col.to_dict() for col in library.provenance],
    }
    header_path = out_dir / f"{stem}.json"
    atomic_write_json(header_path, header)
    return header_path


def load_library(header_path: str | Path) -> ModeLibrary:
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"library header not found: {header_path}")
    header = json.loads(header_path.read_text())
    payload_path = header_path.parent / header["payload_file"]
    if not payload_path.exists():
        raise FileNotFoundError(f"library payload not found: {payload_path}")
    n = int(header["n_cells"])
    r = int(header["n_columns"])
    raw = np.fromfile(payload_path, dtype="<f8")
    if raw.size != n * r:
        raise ValueError(f"library payload holds {raw.size} values, expected {n * r}")
    return ModeLibrary(
        basis=raw.reshape((n, r), order="F"),
        provenance=tuple(LibraryColumn.from_dict(info) for info in header["provenance"]),
    )


class MultiResolutionDMD(BaseEstimator):
    """Estimator wrapper around :func:`decompose`.

    fit(X) accepts a SnapshotSeries or an n x m matrix (rows are cells,
    columns snapshots). The fitted tree is exposed as `tree_`.
    """

    def __init__(self, max_level=12, rho=DEFAULT_RHO, tolerance=DEFAULT_TOLERANCE,
                 rank=None, energy=0.99, max_rank=None, dt_days=None):
        self.max_level = max_level
        self.rho = rho
        self.tolerance = tolerance
        self.rank = rank
        self.energy = energy
        self.max_rank = max_rank
        self.dt_days = dt_days

    def fit(self, X, y=None):
        self.tree_ = decompose(X, max_level=self.max_level, rho=self.rho,
                               tolerance=self.tolerance, rank=self.rank,
                               energy=self.energy, max_rank=self.max_rank,
                               dt_days=self.dt_days)
        self.n_levels_ = self.tree_.n_levels
        self.significant_counts_ = count_significant_modes(self.tree_)
        return self

    def _fitted_tree(self) -> MrdmdTree:
        require(hasattr(self, "tree_"), "estimator is not fitted")
        return self.tree_

    def reconstruct(self, include_residual: bool = False) -> np.ndarray:
        return reconstruct_series(self._fitted_tree(), include_residual=include_residual)

    def build_library(self, include: str = "all") -> ModeLibrary:
        return build_library(self._fitted_tree(), include=include)

    def time_frequency_table(self) -> list[dict]:
        return time_frequency_table(self._fitted_tree())
