import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fieldsense.grid import (
    GridSpec,
    SnapshotSeries,
    coarsen,
    load_snapshots,
    make_timestamps,
    save_snapshots,
    series_from_dense,
    split_windows,
    unflatten,
)


def dense_cube(rows, cols, m, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(rows, cols, m))


class TestMasking:
    def test_cell_bad_in_one_snapshot_masked_throughout(self):
        dense = np.ones((2, 2, 3))
        dense[0, 1, 2] = np.nan
        series = series_from_dense(dense)
        assert series.grid.n_valid == 3
        assert not series.grid.mask[0, 1]
        assert series.grid.mask[0, 0] and series.grid.mask[1, 0] and series.grid.mask[1, 1]

    def test_inf_counts_as_missing(self):
        dense = np.ones((2, 2, 2))
        dense[1, 0, 0] = np.inf
        series = series_from_dense(dense)
        assert not series.grid.mask[1, 0]
        assert series.grid.n_valid == 3

    def test_all_finite_keeps_every_cell(self):
        series = series_from_dense(dense_cube(3, 4, 5))
        assert series.grid.n_valid == 12
        assert series.values.shape == (12, 5)

    def test_fully_masked_grid_rejected(self):
        dense = np.full((2, 2, 2), np.nan)
        with pytest.raises(ValueError):
            series_from_dense(dense)


class TestIndexing:
    def test_valid_indices_row_major(self):
        mask = np.array([[True, False], [True, True]])
        grid = GridSpec(rows=2, cols=2, mask=mask)
        assert grid.valid_indices().tolist() == [0, 2, 3]

    def test_cell_coords_roundtrip(self):
        mask = np.array([[True, False, True], [False, True, True]])
        grid = GridSpec(rows=2, cols=3, mask=mask)
        r, c = grid.cell_coords([0, 1, 2, 3])
        assert r.tolist() == [0, 0, 1, 1]
        assert c.tolist() == [0, 2, 1, 2]

    def test_unflatten_places_nan_on_masked(self):
        mask = np.array([[True, False], [True, True]])
        grid = GridSpec(rows=2, cols=2, mask=mask)
        field = unflatten([1.0, 2.0, 3.0], grid)
        assert field[0, 0] == 1.0
        assert np.isnan(field[0, 1])
        assert field[1, 0] == 2.0 and field[1, 1] == 3.0

    def test_unflatten_length_mismatch(self):
        grid = GridSpec(rows=2, cols=2)
        with pytest.raises(ValueError):
            unflatten([1.0, 2.0, 3.0], grid)

    def test_flatten_unflatten_inverse_on_valid_cells(self):
        mask = np.array([[True, False, True], [True, True, False]])
        grid = GridSpec(rows=2, cols=3, mask=mask)
        vec = np.array([5.0, 6.0, 7.0, 8.0])
        assert np.array_equal(grid.flatten(grid.unflatten(vec)), vec)

    def test_latlon_uses_cell_centers(self):
        grid = GridSpec(rows=2, cols=2, origin_lat=50.0, origin_lon=-120.0,
                        cell_size_deg=(1.0, 2.0))
        lat, lon = grid.cell_latlon([0, 3])
        assert lat.tolist() == [49.5, 48.5]
        assert lon.tolist() == [-119.0, -117.0]

    def test_latlon_nan_without_degree_metadata(self):
        grid = GridSpec(rows=2, cols=2)
        lat, lon = grid.cell_latlon([0])
        assert np.isnan(lat).all() and np.isnan(lon).all()


class TestSeriesValidation:
    def test_timestamps_must_increase(self):
        grid = GridSpec(rows=1, cols=1)
        ts = np.array(["2000-01-02", "2000-01-01"], dtype="datetime64[D]")
        with pytest.raises(ValueError):
            SnapshotSeries(grid=grid, values=np.ones((1, 2)), timestamps=ts)

    def test_timestamps_must_match_dt(self):
        grid = GridSpec(rows=1, cols=1)
        ts = np.array(["2000-01-01", "2000-01-05"], dtype="datetime64[D]")
        with pytest.raises(ValueError):
            SnapshotSeries(grid=grid, values=np.ones((1, 2)), timestamps=ts, dt_days=1.0)

    def test_values_row_count_must_match_grid(self):
        grid = GridSpec(rows=2, cols=2)
        with pytest.raises(ValueError):
            SnapshotSeries(grid=grid, values=np.ones((3, 2)),
                           timestamps=make_timestamps("2000-01-01", 2))

    def test_values_are_read_only(self):
        series = series_from_dense(dense_cube(2, 2, 3))
        with pytest.raises(ValueError):
            series.values[0, 0] = 99.0


class TestCoarsen:
    def test_factor_one_is_identity(self):
        series = series_from_dense(dense_cube(3, 3, 4))
        out = coarsen(series, 1)
        assert np.array_equal(out.values, series.values)
        assert out.grid.rows == 3 and out.grid.cols == 3

    def test_block_mean_all_valid(self):
        dense = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        out = coarsen(series_from_dense(dense), 2)
        assert out.grid.rows == 1 and out.grid.cols == 1
        assert out.values[0, 0] == pytest.approx(2.5)

    def test_block_mean_skips_masked(self):
        dense = np.array([[1.0, 2.0], [3.0, np.nan]]).reshape(2, 2, 1)
        out = coarsen(series_from_dense(dense), 2)
        assert out.values[0, 0] == pytest.approx(2.0)

    def test_block_fully_masked_stays_masked(self):
        dense = np.ones((2, 4, 1))
        dense[:, 2:, 0] = np.nan
        out = coarsen(series_from_dense(dense), 2)
        assert out.grid.mask.tolist() == [[True, False]]

    def test_ceil_dimensions_with_partial_edge_blocks(self):
        dense = np.arange(15.0).reshape(3, 5, 1)
        out = coarsen(series_from_dense(dense), 2)
        assert out.grid.rows == 2 and out.grid.cols == 3
        # bottom-right block holds only cell (2, 4) = 14
        assert out.grid.unflatten(out.values[:, 0])[1, 2] == pytest.approx(14.0)

    def test_cell_size_scales(self):
        series = series_from_dense(dense_cube(4, 4, 2), grid_kwargs={"cell_size_km": 1.0})
        assert coarsen(series, 2).grid.cell_size_km == pytest.approx(2.0)

    def test_timestamps_unchanged(self):
        series = series_from_dense(dense_cube(4, 4, 3))
        out = coarsen(series, 2)
        assert np.array_equal(out.timestamps, series.timestamps)

    def test_overall_mean_preserved_when_all_valid_and_dims_divide(self):
        series = series_from_dense(dense_cube(6, 6, 2, seed=3))
        out = coarsen(series, 3)
        for t in range(2):
            assert out.values[:, t].mean() == pytest.approx(series.values[:, t].mean())


class TestSplitWindows:
    def test_long_series_overlapping_windows(self):
        series = series_from_dense(dense_cube(1, 2, 6209, seed=1))
        first, last = split_windows(series, 4096)
        assert first.n_snapshots == 4096 and last.n_snapshots == 4096
        assert first.timestamps[0] == series.timestamps[0]
        assert last.timestamps[0] == series.timestamps[2113]
        assert last.timestamps[-1] == series.timestamps[-1]

    def test_exact_halves_disjoint(self):
        series = series_from_dense(dense_cube(1, 1, 8))
        first, last = split_windows(series, 4)
        assert np.array_equal(first.values, series.values[:, :4])
        assert np.array_equal(last.values, series.values[:, 4:])

    def test_window_longer_than_series_rejected(self):
        series = series_from_dense(dense_cube(1, 1, 5))
        with pytest.raises(ValueError):
            split_windows(series, 6)

    def test_window_equal_to_series_duplicates(self):
        series = series_from_dense(dense_cube(1, 1, 5))
        first, last = split_windows(series, 5)
        assert np.array_equal(first.values, last.values)


class TestFileRoundTrip:
    @pytest.mark.parametrize("dtype", ["f32", "f64"])
    def test_binary_round_trip(self, tmp_path, dtype):
        dense = dense_cube(3, 4, 6, seed=2).astype(np.float32 if dtype == "f32" else np.float64)
        dense = dense.astype(np.float64)
        dense[1, 2, :] = np.nan
        series = series_from_dense(dense, grid_kwargs={
            "cell_size_km": 10.0, "origin_lat": 49.0, "origin_lon": -125.0,
            "cell_size_deg": (0.09, 0.12),
        }, start_date="2000-01-01")
        header = save_snapshots(series, tmp_path, dtype=dtype)
        back = load_snapshots(header)
        if dtype == "f64":
            assert np.array_equal(back.values, series.values)
        else:
            assert np.allclose(back.values, series.values, atol=1e-5)
        assert np.array_equal(back.grid.mask, series.grid.mask)
        assert back.grid.cell_size_deg == series.grid.cell_size_deg
        assert np.array_equal(back.timestamps, series.timestamps)

    def test_payload_size_mismatch_rejected(self, tmp_path):
        series = series_from_dense(dense_cube(2, 2, 3))
        header_path = save_snapshots(series, tmp_path)
        header = json.loads(header_path.read_text())
        header["n_snapshots"] = 4
        header_path.write_text(json.dumps(header))
        with pytest.raises(ValueError, match="payload size"):
            load_snapshots(header_path)

    def test_missing_payload_file(self, tmp_path):
        series = series_from_dense(dense_cube(2, 2, 3))
        header_path = save_snapshots(series, tmp_path)
        (tmp_path / "snapshots.bin").unlink()
        with pytest.raises(FileNotFoundError):
            load_snapshots(header_path)

    def test_missing_header_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_snapshots(tmp_path / "nope.json")

    def test_unknown_layout_rejected(self, tmp_path):
        series = series_from_dense(dense_cube(2, 2, 3))
        header_path = save_snapshots(series, tmp_path)
        header = json.loads(header_path.read_text())
        header["layout"] = "time-major"
        header_path.write_text(json.dumps(header))
        with pytest.raises(ValueError, match="layout"):
            load_snapshots(header_path)

    def test_csv_load(self, tmp_path):
        path = tmp_path / "snaps.csv"
        path.write_text(
            "r0c0,r0c1,r1c0,r1c1\n"
            "1.0,2.0,3.0,4.0\n"
            "5.0,,7.0,8.0\n"
        )
        series = load_snapshots(path)
        assert series.grid.n_valid == 3
        assert not series.grid.mask[0, 1]
        assert series.values[:, 0].tolist() == [1.0, 3.0, 4.0]
        assert series.values[:, 1].tolist() == [5.0, 7.0, 8.0]

    def test_csv_bad_label_rejected(self, tmp_path):
        path = tmp_path / "snaps.csv"
        path.write_text("r0c0,cell1\n1.0,2.0\n")
        with pytest.raises(ValueError, match="label"):
            load_snapshots(path)

    def test_grid_spec_dict_round_trip(self):
        mask = np.array([[True, False], [True, True]])
        grid = GridSpec(rows=2, cols=2, cell_size_km=5.0, origin_lat=40.0,
                        origin_lon=-100.0, mask=mask, cell_size_deg=(0.05, 0.06))
        back = GridSpec.from_dict(grid.to_dict())
        assert back == grid


@st.composite
def small_series(draw):
    rows = draw(st.integers(min_value=1, max_value=5))
    cols = draw(st.integers(min_value=1, max_value=5))
    m = draw(st.integers(min_value=1, max_value=6))
    dense = draw(hnp.arrays(np.float64, (rows, cols, m),
                            elements=st.floats(-1e6, 1e6, allow_nan=False)))
    # knock out some cells entirely, but keep at least one valid
    n_mask = draw(st.integers(min_value=0, max_value=rows * cols - 1))
    flat = draw(st.permutations(list(range(rows * cols))))
    for idx in flat[:n_mask]:
        dense[idx // cols, idx % cols, :] = np.nan
    return series_from_dense(dense)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(small_series())
    def test_flatten_unflatten_identity(self, series):
        for t in range(series.n_snapshots):
            field = series.snapshot_field(t)
            assert np.array_equal(series.grid.flatten(field), series.values[:, t])

    @settings(max_examples=50, deadline=None)
    @given(small_series(), st.integers(min_value=1, max_value=4))
    def test_coarsen_preserves_total_of_block_means(self, series, factor):
        out = coarsen(series, factor)
        assert out.grid.rows == -(-series.grid.rows // factor)
        assert out.grid.cols == -(-series.grid.cols // factor)
        # every coarse value lies within [min, max] of the fine values
        lo, hi = series.values.min(), series.values.max()
        assert (out.values >= lo - 1e-9).all() and (out.values <= hi + 1e-9).all()

    @settings(max_examples=50, deadline=None)
    @given(small_series())
    def test_round_trip_binary(self, tmp_path_factory, series):
        out_dir = tmp_path_factory.mktemp("series")
        back = load_snapshots(save_snapshots(series, out_dir))
        assert np.array_equal(back.values, series.values)
        assert np.array_equal(back.grid.mask, series.grid.mask)
