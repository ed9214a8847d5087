"""fieldsense: multiresolution mode libraries and pivoted-QR sensor placement.

Submodules load lazily so that importing the package (for the CLI entry
point in particular) does not pull in numpy before thread-count environment
variables are set.
"""

import importlib

__version__ = "0.1.0"

# public name -> owning submodule
_EXPORTS = {
    # grid
    "GridSpec": "grid",
    "SnapshotSeries": "grid",
    "coarsen": "grid",
    "load_snapshots": "grid",
    "make_timestamps": "grid",
    "save_snapshots": "grid",
    "series_from_dense": "grid",
    "split_windows": "grid",
    "unflatten": "grid",
    # dmd
    "DmdResult": "dmd",
    "ExactDMD": "dmd",
    "compute_dmd": "dmd",
    "conjugate_pair_map": "dmd",
    "dmd_reconstruct": "dmd",
    "load_dmd": "dmd",
    "resolve_rank": "dmd",
    "save_dmd": "dmd",
    # mrdmd
    "LibraryColumn": "mrdmd",
    "ModeLibrary": "mrdmd",
    "MrdmdNode": "mrdmd",
    "MrdmdTree": "mrdmd",
    "MultiResolutionDMD": "mrdmd",
    "SignificanceCounts": "mrdmd",
    "apply_tolerance": "mrdmd",
    "build_library": "mrdmd",
    "classify_slow": "mrdmd",
    "count_significant_modes": "mrdmd",
    "decompose": "mrdmd",
    "load_library": "mrdmd",
    "load_tree": "mrdmd",
    "merge_libraries": "mrdmd",
    "reconstruct_series": "mrdmd",
    "save_library": "mrdmd",
    "save_tree": "mrdmd",
    "significance_test": "mrdmd",
    "time_frequency_csv": "mrdmd",
    "time_frequency_table": "mrdmd",
    # placement
    "QRPivotSelector": "placement",
    "SensorSet": "placement",
    "compare_to_monitors": "placement",
    "load_monitor_csv": "placement",
    "load_sensor_csv": "placement",
    "pivoted_qr": "placement",
    "place_sensors": "placement",
    "region_fraction": "placement",
    "save_sensors": "placement",
    "sensor_csv": "placement",
    # reconstruct
    "FieldReconstructor": "reconstruct",
    "OracleResult": "reconstruct",
    "ReconstructionReport": "reconstruct",
    "evaluate": "reconstruct",
    "exhaustive_oracle": "reconstruct",
    "random_baseline": "reconstruct",
    "reconstruct_and_evaluate": "reconstruct",
    "reconstruct_field": "reconstruct",
    "sensor_condition_number": "reconstruct",
    "subset_reconstruction_error": "reconstruct",
    # synth
    "EventSpec": "synth",
    "RecoveryScore": "synth",
    "SynthSpec": "synth",
    "background_field": "synth",
    "generate": "synth",
    "load_synth_spec": "synth",
    "save_synth_spec": "synth",
    "score_recovery": "synth",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    submodule = _EXPORTS.get(name)
    if submodule is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{submodule}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
