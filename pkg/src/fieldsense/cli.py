"""Command-line pipeline: synth -> dmd/mrdmd -> place -> reconstruct -> report.

Every subcommand resolves its options into a RunConfig, writes artifacts
atomically alongside a run_config.json, and prints a JSON summary to stdout.
Failures print {"error": {"type", "message"}} to stderr and exit 2 for
contract or input errors (ValueError, FileNotFoundError) and 1 otherwise.

Heavy numeric imports happen inside the handlers so that --threads can pin
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .fileio import atomic_write_json, atomic_write_text

THREAD_ENV_VARS = ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                   "OMP_NUM_THREADS", "NUMEXPR_NUM_THREADS")

_EXIT_CODES_HELP = (
    "exit codes: 0 success; 2 contract or input error (bad flag values, "
    "missing files, sensor count below library rank); 1 unexpected failure. "
    "Errors print JSON {\"error\": {\"type\", \"message\"}} on stderr."
)


@dataclass(frozen=True)
class RunConfig:
    """Resolved options of one subcommand run; serialized next to artifacts."""

    subcommand: str
    inputs: dict
    outputs: dict
    window_len: int | None = None
    max_level: int | None = None
    rho: float | None = None
    tolerance: float | None = None
    rank: int | None = None
    energy: float | None = None
    max_rank: int | None = None
    sensor_count: int | None = None
    seed: int | None = None
    threads: int | None = None
    two_window: bool = False
    library_mode: str | None = None
    include: str | None = None
    rcond: float | None = None
    baseline: str | None = None
    meridian_lon: float | None = None
    dtype: str | None = None
    version: str = __version__

    def to_dict(self) -> dict:
        info = asdict(self)
        return {key: value for key, value in info.items()
                if value is not None or key in ("two_window",)}

    @classmethod
    def from_dict(cls, info: dict) -> "RunConfig":
        return cls(**info)


def _write_run_config(directory: Path, config: RunConfig) -> Path:
    return atomic_write_json(Path(directory) / "run_config.json", config.to_dict())


def set_thread_env(threads: int | None) -> None:
    """Pin BLAS/OpenMP pools; must run before numpy is first imported."""
    if threads is None:
        return
    if threads < 1:
        raise ValueError(f"--threads must be at least 1, got {threads}")
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def parse_baseline(text: str, default_seed: int = 0) -> dict:
    """Parse a --baseline value like 'random:k=30,seed=5'."""
    kind, _, rest = text.partition(":")
    if kind != "random":
        raise ValueError(f"unknown baseline kind {kind!r}; expected 'random'")
    options = {"kind": "random", "k": 30, "seed": default_seed}
    if rest:
        for part in rest.split(","):
            key, sep, value = part.partition("=")
            if sep != "=" or key not in ("k", "seed"):
                raise ValueError(f"bad baseline option {part!r}; "
                                 "expected k=<int> or seed=<int>")
            options[key] = int(value)
    if options["k"] < 1:
        raise ValueError("baseline trial count k must be at least 1")
    return options


# ---------------------------------------------------------------------------
# input discovery


def _load_series(path):
    from .grid import load_snapshots
    path = Path(path)
    if path.is_dir():
        for name in ("snapshots.json", "snapshots.csv"):
            if (path / name).exists():
                return load_snapshots(path / name)
        raise FileNotFoundError(f"no snapshots.json or snapshots.csv in {path}")
    return load_snapshots(path)


def _library_header(path) -> Path:
    path = Path(path)
    if path.is_dir():
        candidate = path / "library.json"
        if not candidate.exists():
            raise FileNotFoundError(f"no library.json in {path}")
        return candidate
    return path


def _tree_headers(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        single = path / "tree.json"
        if single.exists():
            return [single]
        pair = [path / "tree_0.json", path / "tree_1.json"]
        if all(p.exists() for p in pair):
            return pair
        raise FileNotFoundError(f"no tree.json or tree_0/tree_1.json in {path}")
    if not path.exists():
        raise FileNotFoundError(f"tree header not found: {path}")
    return [path]


def _load_grid(path):
    """Accept a grid.json, a snapshot header, or a directory holding either."""
    from .grid import GridSpec, load_snapshots
    path = Path(path)
    if path.is_dir():
        for name in ("grid.json", "snapshots.json"):
            if (path / name).exists():
                return _load_grid(path / name)
        raise FileNotFoundError(f"no grid.json or snapshots.json in {path}")
    if not path.exists():
        raise FileNotFoundError(f"grid description not found: {path}")
    header = json.loads(path.read_text())
    if "payload_file" in header:
        return load_snapshots(path).grid
    return GridSpec.from_dict(header)


def _sibling_grid(header_path: Path):
    directory = Path(header_path).parent
    for name in ("grid.json", "snapshots.json"):
        if (directory / name).exists():
            return _load_grid(directory / name)
    return None


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth(args) -> dict:
    from dataclasses import replace
    from .grid import save_snapshots
    from .synth import generate, load_synth_spec

    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    series, events = generate(spec)
    out = Path(args.out)
    header = save_snapshots(series, out, dtype=args.dtype)
    truth_path = atomic_write_json(out / "truth.json", {
        "spec": spec.to_dict(),
        "events": [event.to_dict() for event in events],
    })
    config = RunConfig(subcommand="synth",
                       inputs={"spec": str(args.spec)},
                       outputs={"snapshots": str(header), "truth": str(truth_path)},
                       seed=spec.seed, threads=args.threads, dtype=args.dtype)
    _write_run_config(out, config)
    return {"subcommand": "synth",
            "n_cells": series.n_cells,
            "n_snapshots": series.n_snapshots,
            "n_events": len(events),
            "artifacts": config.outputs}


def _cmd_dmd(args) -> dict:
    from .dmd import compute_dmd, save_dmd

    series = _load_series(args.input)
    result = compute_dmd(series.values, dt_days=series.dt_days, rank=args.rank,
                         energy=args.energy, max_rank=args.max_rank)
    out = Path(args.out)
    header = save_dmd(result, out, stem="model")
    config = RunConfig(subcommand="dmd", inputs={"snapshots": str(args.input)},
                       outputs={"model": str(header)},
                       rank=args.rank, energy=args.energy, max_rank=args.max_rank,
                       seed=args.seed, threads=args.threads)
    _write_run_config(out, config)
    return {"subcommand": "dmd",
            "rank": result.rank,
            "frequencies_cycles_per_day": [float(f) for f in
                                           result.frequency_cycles_per_day()],
            "artifacts": config.outputs}


def _tf_map_path(base: Path, flag_value, index: int | None) -> Path:
    path = Path(flag_value) if flag_value != "" else base / "time_frequency.csv"
    if index is None:
        return path
    return path.with_name(f"{path.stem}_{index}{path.suffix}")


def _cmd_mrdmd(args) -> dict:
    from .grid import split_windows
    from .mrdmd import (build_library, count_significant_modes, decompose,
                        merge_libraries, save_library, save_tree,
                        time_frequency_csv)

    if args.levels < 1:
        raise ValueError(f"--levels must be at least 1, got {args.levels}")
    series = _load_series(args.input)
    out = Path(args.out)
    max_level = args.levels - 1

    if args.two_window:
        windows = split_windows(series, args.window_len)
    else:
        windows = (series,)

    trees = [decompose(window, max_level=max_level, rho=args.rho,
                       tolerance=args.tol, rank=args.rank, energy=args.energy,
                       max_rank=args.max_rank)
             for window in windows]

    outputs = {}
    summary_windows = []
    for index, (window, tree) in enumerate(zip(windows, trees)):
        stem = "tree" if len(trees) == 1 else f"tree_{index}"
        outputs[stem] = str(save_tree(tree, out, stem=stem))
        counts = count_significant_modes(tree)
        summary_windows.append({
            "window": index,
            "n_nodes": len(tree.nodes),
            "n_levels": tree.n_levels,
            "window_mean": float(window.values.mean()),
            "significant_total": counts.total,
            "significant_by_level": {str(k): v for k, v in counts.by_level.items()},
        })
        if args.time_frequency_map is not None:
            tf_path = _tf_map_path(out, args.time_frequency_map,
                                   None if len(trees) == 1 else index)
            atomic_write_text(tf_path, time_frequency_csv(tree) + "\n")
            outputs[f"time_frequency_{index}" if len(trees) > 1
                    else "time_frequency"] = str(tf_path)

    libraries = [build_library(tree, include=args.include) for tree in trees]
    if len(libraries) == 1:
        outputs["library"] = str(save_library(libraries[0], out, stem="library"))
        n_columns = libraries[0].n_columns
    elif args.library_mode == "merged":
        merged = merge_libraries(libraries[0], libraries[1])
        outputs["library"] = str(save_library(merged, out, stem="library"))
        n_columns = merged.n_columns
    else:
        for index, library in enumerate(libraries):
            outputs[f"library_{index}"] = str(
                save_library(library, out, stem=f"library_{index}"))
        n_columns = sum(library.n_columns for library in libraries)

    grid_path = atomic_write_json(out / "grid.json", series.grid.to_dict())
    outputs["grid"] = str(grid_path)

    config = RunConfig(subcommand="mrdmd", inputs={"snapshots": str(args.input)},
                       outputs=outputs, window_len=args.window_len,
                       max_level=max_level, rho=args.rho, tolerance=args.tol,
                       rank=args.rank, energy=args.energy, max_rank=args.max_rank,
                       seed=args.seed, threads=args.threads,
                       two_window=args.two_window, library_mode=args.library_mode,
                       include=args.include)
    _write_run_config(out, config)
    return {"subcommand": "mrdmd",
            "windows": summary_windows,
            "library_columns": n_columns,
            "artifacts": outputs}


def _cmd_place(args) -> dict:
    from .mrdmd import load_library
    from .placement import (compare_to_monitors, load_monitor_csv,
                            place_sensors, region_fraction, save_sensors)

    header = _library_header(args.library)
    library = load_library(header)
    grid = _load_grid(args.grid) if args.grid else _sibling_grid(header)

    sensors = place_sensors(library, count=args.count, grid=grid)
    out = Path(args.out)
    csv_path = out if out.suffix.lower() == ".csv" else out / "sensors.csv"
    save_sensors(sensors, csv_path)
    outputs = {"sensors": str(csv_path)}

    try:
        west = region_fraction(sensors, meridian_lon=args.meridian)
    except ValueError:
        west = None

    summary = {"subcommand": "place",
               "n_sensors": sensors.count,
               "library_columns": library.n_columns,
               "region_fraction_west": west,
               "artifacts": outputs}

    if args.compare is not None:
        if grid is None:
            raise ValueError("--compare requires grid geography "
                             "(pass --grid or keep grid.json beside the library)")
        stats = compare_to_monitors(sensors, load_monitor_csv(args.compare), grid)
        compare_path = atomic_write_json(csv_path.parent / "compare.json", stats)
        outputs["compare"] = str(compare_path)
        summary["compare"] = stats

    config = RunConfig(subcommand="place",
                       inputs={"library": str(args.library),
                               **({"grid": str(args.grid)} if args.grid else {}),
                               **({"monitors": str(args.compare)}
                                  if args.compare else {})},
                       outputs=outputs, sensor_count=args.count,
                       seed=args.seed, threads=args.threads,
                       meridian_lon=args.meridian)
    _write_run_config(csv_path.parent, config)
    return summary


def _cmd_reconstruct(args) -> dict:
    import numpy as np
    from .grid import SnapshotSeries, save_snapshots
    from .mrdmd import load_library
    from .placement import load_sensor_csv
    from .reconstruct import (evaluate, random_baseline, reconstruct_field,
                              sensor_condition_number)

    library = load_library(_library_header(args.library))
    sensors = load_sensor_csv(args.sensors)
    series = _load_series(args.input)
    out = Path(args.out)

    measurements = series.values[sensors.pivots, :]
    recon = reconstruct_field(library, sensors, measurements, rcond=args.rcond)
    report = evaluate(series, recon,
                      condition_number=sensor_condition_number(library, sensors))
    info = report.to_dict()

    if args.baseline is not None:
        options = parse_baseline(args.baseline,
                                 default_seed=0 if args.seed is None else args.seed)
        errors = random_baseline(library, series.values, count=sensors.count,
                                 n_trials=options["k"], seed=options["seed"])
        median = float(np.median(errors))
        info["baseline"] = {
            "kind": options["kind"], "k": options["k"], "seed": options["seed"],
            "errors": [float(e) for e in errors],
            "median_error": median,
            "pivot_error": report.relative_frobenius,
            "pivot_beats_median": bool(report.relative_frobenius <= median),
        }

    outputs = {"report": str(atomic_write_json(out / "report.json", info))}
    if args.rmse_field:
        rmse_series = SnapshotSeries(
            grid=series.grid,
            values=np.asarray(report.per_cell_rmse)[:, None],
            timestamps=series.timestamps[:1].copy(),
            dt_days=series.dt_days, units=series.units)
        outputs["rmse_field"] = str(save_snapshots(rmse_series, out, stem="rmse"))

    config = RunConfig(subcommand="reconstruct",
                       inputs={"library": str(args.library),
                               "sensors": str(args.sensors),
                               "snapshots": str(args.input)},
                       outputs=outputs, rcond=args.rcond, baseline=args.baseline,
                       seed=args.seed, threads=args.threads)
    _write_run_config(out, config)
    # stdout keeps the scalars; the full per-cell/per-snapshot arrays live in
    # report.json
    summary = {"subcommand": "reconstruct", "artifacts": outputs,
               "relative_frobenius": info["relative_frobenius"],
               "condition_number": info["condition_number"]}
    if "baseline" in info:
        summary["baseline"] = info["baseline"]
    return summary


def _cmd_report(args):
    from .mrdmd import count_significant_modes, load_tree, time_frequency_csv

    headers = _tree_headers(args.tree)
    trees = [load_tree(header) for header in headers]

    if args.time_frequency_map == "-":
        for tree in trees:
            sys.stdout.write(time_frequency_csv(tree) + "\n")
        return None

    outputs = {}
    windows = []
    for index, (header, tree) in enumerate(zip(headers, trees)):
        counts = count_significant_modes(tree)
        windows.append({
            "window": index,
            "tree": str(header),
            "n_nodes": len(tree.nodes),
            "n_levels": tree.n_levels,
            "significant_total": counts.total,
            "significant_by_level": {str(k): v for k, v in counts.by_level.items()},
        })
        if args.time_frequency_map is not None:
            tf_path = _tf_map_path(Path(headers[0]).parent, args.time_frequency_map,
                                   None if len(trees) == 1 else index)
            atomic_write_text(tf_path, time_frequency_csv(tree) + "\n")
            outputs[f"time_frequency_{index}" if len(trees) > 1
                    else "time_frequency"] = str(tf_path)

    return {"subcommand": "report", "windows": windows, "artifacts": outputs}


# ---------------------------------------------------------------------------
# parser


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("global options")
    group.add_argument("--seed", type=int, default=None,
                       help="override the random seed (synth spec seed, "
                            "baseline sampling seed)")
    group.add_argument("--threads", type=int, default=None,
                       help="pin BLAS/OpenMP thread pools to this count")
    group.add_argument("--config", type=Path, default=None,
                       help="JSON file whose keys override flag values "
                            "(dashes map to underscores)")


def _rank_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("rank policy")
    group.add_argument("--rank", type=int, default=None,
                       help="fixed truncation rank (overrides --energy)")
    group.add_argument("--energy", type=float, default=0.99,
                       help="squared-singular-value energy fraction to retain "
                            "(default 0.99)")
    group.add_argument("--max-rank", type=int, default=None,
                       help="upper cap on the resolved rank")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldsense",
        description="Multiresolution mode libraries and pivoted-QR sensor "
                    "placement for gridded time series.",
        epilog=_EXIT_CODES_HELP)
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="subcommand", required=True,
                                       metavar="{synth,dmd,mrdmd,place,reconstruct,report}")

    p_synth = subparsers.add_parser(
        "synth", help="generate a synthetic series with planted events",
        description="Generate a synthetic snapshot series from a JSON spec; "
                    "writes snapshots.json/.bin, truth.json and run_config.json.",
        epilog=_EXIT_CODES_HELP)
    p_synth.add_argument("--spec", type=Path, required=True,
                         help="synthesis spec JSON (grid, events, noise, seed)")
    p_synth.add_argument("--out", type=Path, required=True,
                         help="output directory")
    p_synth.add_argument("--dtype", choices=("f64", "f32"), default="f64",
                         help="payload precision (default f64)")
    p_synth.set_defaults(handler=_cmd_synth)

    p_dmd = subparsers.add_parser(
        "dmd", help="single-window modal decomposition",
        description="Decompose a snapshot series into modes with exponential "
                    "time dynamics; writes model.json/.bin and run_config.json.",
        epilog=_EXIT_CODES_HELP)
    p_dmd.add_argument("--in", dest="input", type=Path, required=True,
                       help="snapshot header (or directory holding snapshots.json)")
    p_dmd.add_argument("--out", type=Path, required=True, help="output directory")
    _rank_flags(p_dmd)
    p_dmd.set_defaults(handler=_cmd_dmd)

    p_mrdmd = subparsers.add_parser(
        "mrdmd", help="multiresolution decomposition over a dyadic window tree",
        description="Recursively separate slow modes over halving windows; "
                    "writes tree.json/.bin, library.json/.bin, grid.json and "
                    "run_config.json.",
        epilog=_EXIT_CODES_HELP)
    p_mrdmd.add_argument("--in", dest="input", type=Path, required=True,
                         help="snapshot header (or directory holding snapshots.json)")
    p_mrdmd.add_argument("--out", type=Path, required=True, help="output directory")
    p_mrdmd.add_argument("--levels", type=int, default=13,
                         help="number of levels counting the root (default 13)")
    p_mrdmd.add_argument("--tol", "--tolerance", dest="tol", type=float,
                         default=1e-2,
                         help="significance tolerance relative to the "
                              "background (default 1e-2)")
    p_mrdmd.add_argument("--rho", type=float, default=1.0,
                         help="max oscillation cycles per window for a slow "
                              "mode (default 1)")
    p_mrdmd.add_argument("--window-len", type=int, default=4096,
                         help="snapshots per window for --two-window "
                              "(default 4096)")
    p_mrdmd.add_argument("--two-window", action="store_true",
                         help="decompose the first and last window-len "
                              "snapshots separately")
    p_mrdmd.add_argument("--library-mode", choices=("merged", "separate"),
                         default="merged",
                         help="with --two-window, concatenate both windows' "
                              "libraries or write them separately")
    p_mrdmd.add_argument("--include", choices=("all", "significant"),
                         default="all",
                         help="which retained modes enter the library")
    p_mrdmd.add_argument("--time-frequency-map", nargs="?", const="",
                         default=None, metavar="PATH",
                         help="write the level/bin significance table as CSV "
                              "(default PATH: <out>/time_frequency.csv)")
    _rank_flags(p_mrdmd)
    p_mrdmd.set_defaults(handler=_cmd_mrdmd)

    p_place = subparsers.add_parser(
        "place", help="select sensor cells as QR pivots of the mode library",
        description="Greedy pivoted-QR sensor placement; writes sensors.csv "
                    "and run_config.json. Refuses sensor counts above the "
                    "library column count.",
        epilog=_EXIT_CODES_HELP)
    p_place.add_argument("--library", type=Path, required=True,
                         help="library header (or directory holding library.json)")
    p_place.add_argument("--out", type=Path, required=True,
                         help="sensors.csv path, or a directory to put it in")
    p_place.add_argument("--count", type=int, default=None,
                         help="number of sensors (default: library column count)")
    p_place.add_argument("--grid", type=Path, default=None,
                         help="grid.json or snapshot header supplying "
                              "row/col/lat/lon (default: grid.json beside the "
                              "library)")
    p_place.add_argument("--compare", type=Path, default=None, metavar="CSV",
                         help="monitor-location CSV (lat, lon columns); emits "
                              "nearest-cell overlap statistics")
    p_place.add_argument("--meridian", type=float, default=-100.0,
                         help="longitude splitting west from east in the "
                              "summary statistic (default -100)")
    p_place.set_defaults(handler=_cmd_place)

    p_rec = subparsers.add_parser(
        "reconstruct", help="estimate full fields from sensor readings",
        description="Least-squares field reconstruction through the mode "
                    "library from sensor-cell measurements; writes report.json "
                    "and run_config.json.",
        epilog=_EXIT_CODES_HELP)
    p_rec.add_argument("--library", type=Path, required=True,
                       help="library header (or directory holding library.json)")
    p_rec.add_argument("--sensors", type=Path, required=True,
                       help="sensor CSV from the place subcommand")
    p_rec.add_argument("--in", dest="input", type=Path, required=True,
                       help="snapshot header of the evaluation series")
    p_rec.add_argument("--out", type=Path, required=True, help="output directory")
    p_rec.add_argument("--rcond", type=float, default=1e-10,
                       help="relative singular-value cutoff for the "
                            "least-squares solve (default 1e-10)")
    p_rec.add_argument("--baseline", type=str, default=None,
                       metavar="random:k=30,seed=S",
                       help="compare against k uniform-random sensor sets of "
                            "equal size")
    p_rec.add_argument("--rmse-field", action="store_true",
                       help="also write the per-cell RMSE as a one-snapshot "
                            "field (rmse.json/.bin)")
    p_rec.set_defaults(handler=_cmd_reconstruct)

    p_report = subparsers.add_parser(
        "report", help="summarize a decomposition tree",
        description="Per-level significance counts and optional "
                    "time-frequency CSV for stored trees.",
        epilog=_EXIT_CODES_HELP)
    p_report.add_argument("--tree", type=Path, required=True,
                          help="tree header (or directory holding tree.json "
                               "or tree_0/tree_1.json)")
    p_report.add_argument("--time-frequency-map", nargs="?", const="-",
                          default=None, metavar="PATH",
                          help="emit the level/bin significance table as CSV "
                               "to PATH (default: stdout)")
    p_report.set_defaults(handler=_cmd_report)

    for sub in (p_synth, p_dmd, p_mrdmd, p_place, p_rec, p_report):
        _add_global_flags(sub)
    return parser


def _apply_config_file(args: argparse.Namespace) -> None:
    """--config JSON overrides parsed flag values; the file wins."""
    if args.config is None:
        return
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    overrides = json.loads(path.read_text())
    if not isinstance(overrides, dict):
        raise ValueError("config file must hold a JSON object")
    known = set(vars(args)) - {"handler", "subcommand", "config"}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValueError(f"unknown config key {key!r} for subcommand "
                             f"{args.subcommand!r}")
        if isinstance(getattr(args, dest), Path) and isinstance(value, str):
            value = Path(value)
        setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args)
        set_thread_env(args.threads)
        summary = args.handler(args)
    except (ValueError, FileNotFoundError) as exc:
        _print_error(exc)
        return 2
    except Exception as exc:
        _print_error(exc)
        return 1
    if summary is not None:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _print_error(exc: BaseException) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
