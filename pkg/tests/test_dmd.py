import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldsense.dmd import (
    DmdResult,
    ExactDMD,
    compute_dmd,
    conjugate_pair_map,
    dmd_reconstruct,
    load_dmd,
    resolve_rank,
    save_dmd,
)


def rotation_data(n=100, m=64, period=16.0, seed=0):
    """x_t = cos(2*pi*t/period) u + sin(2*pi*t/period) v, orthonormal u, v."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(n, 2)))
    u, v = basis[:, 0], basis[:, 1]
    t = np.arange(m)
    theta = 2 * np.pi * t / period
    return np.outer(u, np.cos(theta)) + np.outer(v, np.sin(theta))


def linear_recurrence_data(n=30, r=4, m=40, seed=1):
    """x_{t+1} = A x_t with A of rank r and spectral radius < 1."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(n, r)))
    core = rng.normal(size=(r, r))
    core *= 0.9 / max(np.abs(np.linalg.eigvals(core)))
    A = basis @ core @ basis.T
    X = np.empty((n, m))
    X[:, 0] = basis @ rng.normal(size=r)
    for t in range(m - 1):
        X[:, t + 1] = A @ X[:, t]
    return X, A


class TestResolveRank:
    def test_fixed_rank_wins(self):
        s = np.array([10.0, 5.0, 1.0, 0.5])
        assert resolve_rank(s, rank=2, energy=0.5) == 2

    def test_energy_fraction_squared(self):
        # squared energies 100, 25, 1 -> cumulative 0.794, 0.992, 1.0
        s = np.array([10.0, 5.0, 1.0])
        assert resolve_rank(s, energy=0.79) == 1
        assert resolve_rank(s, energy=0.80) == 2
        assert resolve_rank(s, energy=0.995) == 3

    def test_energy_one_keeps_all_usable(self):
        s = np.array([3.0, 2.0, 1.0])
        assert resolve_rank(s, energy=1.0) == 3

    def test_tiny_singulars_never_retained(self):
        s = np.array([1.0, 1e-15])
        assert resolve_rank(s, rank=2) == 1
        assert resolve_rank(s, energy=1.0) == 1

    def test_zero_spectrum_resolves_to_zero(self):
        assert resolve_rank(np.zeros(3), energy=0.99) == 0
        assert resolve_rank(np.zeros(3), rank=2) == 0

    def test_max_rank_caps(self):
        s = np.array([3.0, 2.0, 1.0])
        assert resolve_rank(s, energy=1.0, max_rank=2) == 2
        assert resolve_rank(s, rank=3, max_rank=1) == 1

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            resolve_rank([1.0], rank=0)
        with pytest.raises(ValueError):
            resolve_rank([1.0], energy=0.0)
        with pytest.raises(ValueError):
            resolve_rank([1.0], energy=1.5)


class TestComputeDmd:
    def test_constant_field_is_pure_background_mode(self):
        c = np.array([3.0, 4.0, 12.0])
        X = np.tile(c[:, None], (1, 5))
        result = compute_dmd(X, dt_days=1.0)
        assert result.rank == 1
        assert result.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)
        assert result.omega[0] == pytest.approx(0.0, abs=1e-12)
        mode = result.modes[:, 0]
        assert np.allclose(np.abs(mode), c / np.linalg.norm(c), atol=1e-12)
        assert result.amplitudes[0] == pytest.approx(np.linalg.norm(c), abs=1e-9)
        # amplitude * mode reproduces the column itself
        assert np.allclose((result.amplitudes[0] * mode).real, c, atol=1e-9)

    def test_rotation_eigenvalues_recovered(self):
        X = rotation_data()
        result = compute_dmd(X, dt_days=1.0)
        assert result.rank == 2
        expected = np.exp(2j * np.pi / 16)
        got = sorted(result.eigenvalues, key=lambda z: z.imag)
        assert abs(got[1] - expected) < 1e-8
        assert abs(got[0] - expected.conjugate()) < 1e-8

    def test_rotation_reconstruction(self):
        X = rotation_data()
        result = compute_dmd(X, dt_days=1.0)
        approx = dmd_reconstruct(result, np.arange(16))
        err = np.linalg.norm(approx - X[:, :16]) / np.linalg.norm(X[:, :16])
        assert err < 1e-8

    def test_exact_rank_three_energy_policy(self):
        rng = np.random.default_rng(7)
        X = sum(np.outer(rng.normal(size=20), rng.normal(size=12)) for _ in range(3))
        result = compute_dmd(X, energy=0.999)
        assert result.rank == 3
        assert result.singular_values.shape == (3,)

    def test_linear_recurrence_reconstruction(self):
        X, _ = linear_recurrence_data()
        result = compute_dmd(X, energy=1.0)
        approx = dmd_reconstruct(result, np.arange(X.shape[1], dtype=float))
        assert np.linalg.norm(approx - X) / np.linalg.norm(X) < 1e-8

    def test_propagator_eigenrelation(self):
        # modes and eigenvalues satisfy A Phi ~ Phi diag(lambda) for the
        # best-fit propagator restricted to the retained subspace
        X, A = linear_recurrence_data(n=25, r=3, m=30, seed=5)
        result = compute_dmd(X, energy=1.0)
        lhs = A @ result.modes
        rhs = result.modes * result.eigenvalues[None, :]
        assert np.allclose(lhs, rhs, atol=1e-8)

    def test_too_few_snapshots(self):
        with pytest.raises(ValueError):
            compute_dmd(np.ones((4, 1)))

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            compute_dmd(np.zeros((4, 6)))

    def test_nonfinite_rejected(self):
        X = np.ones((3, 4))
        X[1, 2] = np.nan
        with pytest.raises(ValueError):
            compute_dmd(X)

    def test_rank_cannot_exceed_usable(self):
        X = rotation_data()  # exact rank 2
        result = compute_dmd(X, rank=10)
        assert result.rank == 2

    def test_eigenvalue_scale_invariance(self):
        X, _ = linear_recurrence_data(seed=3)
        e1 = np.sort_complex(compute_dmd(X, energy=1.0).eigenvalues)
        e2 = np.sort_complex(compute_dmd(1000.0 * X, energy=1.0).eigenvalues)
        assert np.allclose(e1, e2, atol=1e-10)

    def test_amplitudes_scale_linearly(self):
        X, _ = linear_recurrence_data(seed=4)
        r1 = compute_dmd(X, energy=1.0)
        r2 = compute_dmd(5.0 * X, energy=1.0)
        b1 = np.sort(np.abs(r1.amplitudes))
        b2 = np.sort(np.abs(r2.amplitudes))
        assert np.allclose(5.0 * b1, b2, rtol=1e-8)

    def test_conjugate_pairing(self):
        X = rotation_data(n=40, m=48, period=12.0, seed=9) \
            + 0.3 * rotation_data(n=40, m=48, period=5.0, seed=10)
        result = compute_dmd(X, energy=1.0)
        partner = conjugate_pair_map(result.eigenvalues)
        assert (partner >= 0).all()
        for i, j in enumerate(partner):
            assert np.isclose(result.eigenvalues[i],
                              result.eigenvalues[j].conjugate(), atol=1e-9)
            assert np.allclose(result.modes[:, i],
                               result.modes[:, j].conjugate(), atol=1e-8)
            assert np.isclose(result.amplitudes[i],
                              result.amplitudes[j].conjugate(), atol=1e-8)

    def test_unit_mode_norms(self):
        X, _ = linear_recurrence_data(seed=11)
        result = compute_dmd(X, energy=1.0)
        assert np.allclose(np.linalg.norm(result.modes, axis=0), 1.0, atol=1e-12)

    def test_dt_scales_omega(self):
        X = rotation_data()
        r1 = compute_dmd(X, dt_days=1.0)
        r2 = compute_dmd(X, dt_days=2.0)
        w1 = np.sort(r1.omega.imag)
        w2 = np.sort(r2.omega.imag)
        assert np.allclose(w1, 2.0 * w2, atol=1e-10)


class TestReconstruct:
    def test_constant_field_any_time(self):
        c = np.array([1.0, 2.0, 2.0])
        X = np.tile(c[:, None], (1, 4))
        result = compute_dmd(X)
        out = dmd_reconstruct(result, [0.0, 3.5, 100.0])
        assert np.allclose(out, c[:, None], atol=1e-9)

    def test_empty_times(self):
        X = rotation_data()
        result = compute_dmd(X)
        out = dmd_reconstruct(result, [])
        assert out.shape == (100, 0)

    def test_imaginary_residual_small(self):
        X = rotation_data()
        result = compute_dmd(X)
        t = np.arange(16, dtype=float)
        dynamics = result.eigenvalues[:, None] ** t[None, :]
        full = result.modes @ (result.amplitudes[:, None] * dynamics)
        assert np.abs(full.imag).max() < 1e-8 * np.linalg.norm(full.real)

    def test_zero_eigenvalue_time_zero(self):
        # one decay-to-zero step: lambda = 0, and 0**0 = 1 keeps t=0 finite
        result = DmdResult(modes=np.array([[1.0], [0.0]], dtype=complex),
                           eigenvalues=[0.0], amplitudes=[2.0],
                           singular_values=[1.0])
        out = dmd_reconstruct(result, [0.0, 1.0])
        assert out[0, 0] == pytest.approx(2.0)
        assert out[0, 1] == pytest.approx(0.0)

    def test_restricted_empty_result_reconstructs_zeros(self):
        X = rotation_data()
        result = compute_dmd(X).restrict([])
        assert result.rank == 0
        out = dmd_reconstruct(result, [0.0, 1.0])
        assert out.shape == (100, 2)
        assert (out == 0).all()


class TestRestrict:
    def test_boolean_and_index_selectors_agree(self):
        X, _ = linear_recurrence_data()
        result = compute_dmd(X, energy=1.0)
        by_bool = result.restrict(np.arange(result.rank) < 2)
        by_index = result.restrict([0, 1])
        assert np.array_equal(by_bool.modes, by_index.modes)
        assert np.array_equal(by_bool.eigenvalues, by_index.eigenvalues)

    def test_out_of_range_rejected(self):
        X, _ = linear_recurrence_data()
        result = compute_dmd(X, energy=1.0)
        with pytest.raises(ValueError):
            result.restrict([result.rank])


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        X, _ = linear_recurrence_data(seed=2)
        result = compute_dmd(X, energy=1.0, dt_days=2.0)
        back = load_dmd(save_dmd(result, tmp_path))
        assert np.array_equal(back.modes, result.modes)
        assert np.array_equal(back.eigenvalues, result.eigenvalues)
        assert np.array_equal(back.amplitudes, result.amplitudes)
        assert np.array_equal(back.singular_values, result.singular_values)
        assert back.dt_days == result.dt_days

    def test_payload_layout_column_major_real_then_imag(self, tmp_path):
        modes = np.array([[1.0 + 5j, 3.0 + 7j],
                          [2.0 + 6j, 4.0 + 8j]])
        modes /= np.linalg.norm(modes, axis=0)
        result = DmdResult(modes=modes, eigenvalues=[1.0, 1.0],
                           amplitudes=[1.0, 1.0], singular_values=[2.0, 1.0])
        header = save_dmd(result, tmp_path, stem="layout")
        raw = np.fromfile(tmp_path / "layout_modes.bin", dtype="<f8")
        flat = np.concatenate([modes.real.ravel(order="F"), modes.imag.ravel(order="F")])
        assert np.array_equal(raw, flat)
        assert header.name == "layout.json"

    def test_truncated_payload_rejected(self, tmp_path):
        X, _ = linear_recurrence_data()
        header = save_dmd(compute_dmd(X, energy=1.0), tmp_path)
        payload = tmp_path / "dmd_modes.bin"
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            load_dmd(header)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dmd(tmp_path / "absent.json")


class TestEstimator:
    def test_fit_predict(self):
        X = rotation_data()
        est = ExactDMD().fit(X)
        assert est.rank_ == 2
        approx = est.predict(np.arange(X.shape[1], dtype=float))
        assert np.linalg.norm(approx - X) / np.linalg.norm(X) < 1e-8

    def test_get_params_round_trip(self):
        est = ExactDMD(rank=3, dt_days=2.0)
        params = est.get_params()
        assert params["rank"] == 3 and params["dt_days"] == 2.0
        clone = ExactDMD(**params)
        assert clone.get_params() == params

    def test_score_near_zero_error(self):
        X = rotation_data()
        est = ExactDMD().fit(X)
        assert est.score(X) > -1e-8

    def test_unfitted_predict_rejected(self):
        with pytest.raises(ValueError):
            ExactDMD().predict([0.0])


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=7, max_value=12).flatmap(
        lambda m: st.tuples(st.just(m), st.integers(min_value=2, max_value=min(6, m - 1)))),
        st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_recurrence_reconstruction_property(self, m_and_r, seed):
        m, r = m_and_r
        X, _ = linear_recurrence_data(n=r + 5, r=r, m=m, seed=seed)
        if np.linalg.norm(X) < 1e-8:
            return
        result = compute_dmd(X, energy=1.0)
        approx = dmd_reconstruct(result, np.arange(m, dtype=float))
        assert np.linalg.norm(approx - X) <= 1e-8 * max(np.linalg.norm(X), 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_conjugate_symmetry_property(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(12, 10))
        result = compute_dmd(X, energy=1.0)
        eigs = result.eigenvalues
        # sorting by (real, imag) pairs every non-real eigenvalue with its conjugate
        order = np.lexsort((eigs.imag, eigs.real))
        paired = eigs[order]
        i = 0
        while i < paired.size:
            if abs(paired[i].imag) < 1e-9 * max(1.0, abs(paired[i])):
                i += 1
                continue
            assert i + 1 < paired.size
            assert np.isclose(paired[i], paired[i + 1].conjugate(), atol=1e-8)
            i += 2
