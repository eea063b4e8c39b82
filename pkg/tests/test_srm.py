import threading

import numpy as np
import pytest

from datagen import srm_subjects
from factorfit import reference, srm
from factorfit.collectives import SerialCommunicator, create_thread_communicators
from factorfit.data_io import SubjectData
from factorfit.errors import ConfigError, RankError, ShapeError
from factorfit.kernels import polar_orthogonal, trace_ata


def random_model(rng, n_subjects=3, n_voxels=20, n_trs=15, k=4):
    Ws = [polar_orthogonal(rng.standard_normal((n_voxels, k))) for _ in range(n_subjects)]
    rho2 = list(rng.uniform(0.3, 2.5, n_subjects))
    C = rng.standard_normal((k, k))
    sigma_s = C @ C.T + np.eye(k)
    Xhats = [
        srm.demean(rng.standard_normal((n_voxels, n_trs)))[0]
        for _ in range(n_subjects)
    ]
    return Ws, rho2, sigma_s, Xhats


class TestDemean:
    def test_small_example(self):
        Xhat, mu = srm.demean(np.array([[1.0, 3.0], [2.0, 2.0]]))
        assert np.array_equal(mu, [2.0, 2.0])
        assert np.array_equal(Xhat, [[-1.0, 1.0], [0.0, 0.0]])

    def test_zero_mean_input_unchanged(self):
        X = np.array([[1.0, -1.0], [2.0, -2.0]])
        Xhat, mu = srm.demean(X)
        assert np.array_equal(Xhat, X)
        assert np.array_equal(mu, [0.0, 0.0])

    def test_row_sums_vanish(self):
        rng = np.random.default_rng(0)
        Xhat, _ = srm.demean(rng.normal(5.0, 2.0, (100, 20)))
        assert np.max(np.abs(Xhat.sum(axis=1))) <= 1e-10


class TestInitSubject:
    def test_square_case_orthogonal(self):
        W, rho2 = srm.init_subject(4, srm.SrmConfig(k=4, seed=3), 0)
        assert rho2 == 1.0
        assert abs(abs(np.linalg.det(W)) - 1.0) <= 1e-8

    def test_deterministic(self):
        cfg = srm.SrmConfig(k=3, seed=42)
        W1, _ = srm.init_subject(10, cfg, 5)
        W2, _ = srm.init_subject(10, cfg, 5)
        assert np.array_equal(W1, W2)

    def test_seed_changes_result(self):
        W1, _ = srm.init_subject(10, srm.SrmConfig(k=3, seed=1), 0)
        W2, _ = srm.init_subject(10, srm.SrmConfig(k=3, seed=2), 0)
        assert np.linalg.norm(W1 - W2) > 0.0

    def test_too_few_voxels(self):
        with pytest.raises(ShapeError):
            srm.init_subject(2, srm.SrmConfig(k=3), 0)


class TestEStep:
    def test_local_identity_mapping(self):
        rng = np.random.default_rng(1)
        Xhat = rng.standard_normal((6, 5))
        W = np.zeros((6, 2))
        W[0, 0] = W[1, 1] = 1.0
        out = srm.e_step_local(W, 1.0, Xhat)
        assert np.array_equal(out, Xhat[:2])

    def test_local_zero_data(self):
        W = polar_orthogonal(np.random.default_rng(2).standard_normal((5, 2)))
        assert np.array_equal(srm.e_step_local(W, 2.0, np.zeros((5, 4))), np.zeros((2, 4)))

    def test_local_matches_dense(self):
        rng = np.random.default_rng(3)
        W = polar_orthogonal(rng.standard_normal((9, 3)))
        Xhat = rng.standard_normal((9, 7))
        out = srm.e_step_local(W, 1.7, Xhat)
        assert np.max(np.abs(out - (1 / 1.7) * W.T @ Xhat)) <= 1e-12

    def test_global_single_subject_identity_covariance(self):
        rng = np.random.default_rng(4)
        W = polar_orthogonal(rng.standard_normal((8, 3)))
        Xhat = srm.demean(rng.standard_normal((8, 6)))[0]
        reduced = srm.e_step_local(W, 1.0, Xhat)
        S, var_s = srm.e_step_global(reduced, np.eye(3), 1.0)
        assert np.max(np.abs(S - 0.5 * W.T @ Xhat)) <= 1e-12
        assert np.max(np.abs(var_s - 0.5 * np.eye(3))) <= 1e-12

    def test_global_zero_reduction(self):
        S, _ = srm.e_step_global(np.zeros((3, 5)), np.eye(3), 2.0)
        assert np.array_equal(S, np.zeros((3, 5)))

    def test_woodbury_equivalence(self):
        rng = np.random.default_rng(5)
        Ws, rho2, sigma_s, Xhats = random_model(rng)
        reduced = sum(srm.e_step_local(W, r, X) for W, r, X in zip(Ws, rho2, Xhats))
        rho0 = sum(1.0 / r for r in rho2)
        S_opt, var_opt = srm.e_step_global(reduced, sigma_s, rho0)
        S_ref, var_ref = reference.naive_posterior(Ws, rho2, sigma_s, Xhats)
        assert np.max(np.abs(S_opt - S_ref)) <= 1e-8
        assert np.max(np.abs(var_opt - var_ref)) <= 1e-8

    def test_global_singular_covariance_rejected(self):
        from factorfit.errors import DefinitenessError

        singular = np.zeros((3, 3))
        with pytest.raises(DefinitenessError):
            srm.e_step_global(np.zeros((3, 4)), singular, 1.0)


class TestUpdateSigma:
    def test_zero_response(self):
        sigma_new, trace = srm.update_sigma_s(np.eye(3), 1.0, np.zeros((3, 4)))
        assert np.max(np.abs(sigma_new - 0.5 * np.eye(3))) <= 1e-12
        assert abs(trace - 1.5) <= 1e-12

    def test_scalar_case(self):
        sigma_new, trace = srm.update_sigma_s(np.eye(1), 1.0, np.array([[2.0]]))
        assert abs(sigma_new[0, 0] - 4.5) <= 1e-12
        assert abs(trace - 4.5) <= 1e-12

    def test_matches_naive_second_moment(self):
        rng = np.random.default_rng(6)
        Ws, rho2, sigma_s, Xhats = random_model(rng)
        reduced = sum(srm.e_step_local(W, r, X) for W, r, X in zip(Ws, rho2, Xhats))
        rho0 = sum(1.0 / r for r in rho2)
        S, _ = srm.e_step_global(reduced, sigma_s, rho0)
        sigma_new, _ = srm.update_sigma_s(sigma_s, rho0, S)
        S_ref, var_ref = reference.naive_posterior(Ws, rho2, sigma_s, Xhats)
        assert np.max(np.abs(sigma_new - reference.naive_sigma_update(S_ref, var_ref))) <= 1e-8


class TestMStep:
    def test_exact_model_recovers_mapping(self):
        rng = np.random.default_rng(7)
        W_true = polar_orthogonal(rng.standard_normal((12, 3)))
        S = rng.standard_normal((3, 10))
        Xhat = W_true @ S
        trace = trace_ata(S) / S.shape[1]  # zero posterior covariance limit
        W_new, rho2 = srm.m_step_subject(Xhat, S, trace)
        assert np.max(np.abs(W_new - W_true)) <= 1e-10
        assert rho2 <= 1e-10

    def test_zero_response_degenerate(self):
        rng = np.random.default_rng(8)
        Xhat = rng.standard_normal((6, 4))
        with pytest.raises(RankError):
            srm.m_step_subject(Xhat, np.zeros((2, 4)), 1.0)

    def test_matches_naive_rho(self):
        rng = np.random.default_rng(9)
        Ws, rho2, sigma_s, Xhats = random_model(rng)
        reduced = sum(srm.e_step_local(W, r, X) for W, r, X in zip(Ws, rho2, Xhats))
        rho0 = sum(1.0 / r for r in rho2)
        S, var_s = srm.e_step_global(reduced, sigma_s, rho0)
        _, trace = srm.update_sigma_s(sigma_s, rho0, S)
        W_new, rho2_new = srm.m_step_subject(Xhats[0], S, trace)
        # oracle: expected residual plus posterior-covariance correction,
        # with the trace identity applied to the same posterior
        S_ref, var_ref = reference.naive_posterior(Ws, rho2, sigma_s, Xhats)
        sigma_ref = reference.naive_sigma_update(S_ref, var_ref)
        expected = reference.naive_rho2(
            Xhats[0], W_new, S_ref, sigma_ref - (S_ref @ S_ref.T) / S.shape[1]
        )
        assert abs(rho2_new - expected) <= 1e-8

    def test_rho_floor(self):
        W_true = polar_orthogonal(np.random.default_rng(10).standard_normal((5, 2)))
        S = np.random.default_rng(11).standard_normal((2, 8))
        _, rho2 = srm.m_step_subject(W_true @ S, S, trace_ata(S) / 8)
        assert rho2 >= 1e-12


class TestFit:
    def test_near_noiseless_reconstruction(self):
        rng = np.random.default_rng(12)
        k = 2
        W_true = polar_orthogonal(rng.standard_normal((8, k)))
        S_true = rng.standard_normal((k, 6))
        X = W_true @ S_true + 1e-6 * rng.standard_normal((8, 6))
        model = srm.fit(
            [SubjectData("s0", X)],
            srm.SrmConfig(k=k, iterations=20, seed=0),
            SerialCommunicator(),
        )
        Xhat = srm.demean(X)[0]
        resid = np.linalg.norm(Xhat - model.W[0] @ model.S) ** 2
        assert resid / np.linalg.norm(Xhat) ** 2 <= 1e-3

    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError):
            srm.SrmConfig(k=2, iterations=0).validate()

    def test_serial_vs_two_thread_ranks_bit_identical(self):
        matrices, _ = srm_subjects(n_subjects=4, n_voxels=30, n_trs=12, k=3, seed=99)
        subjects = [SubjectData(f"s{i}", X) for i, X in enumerate(matrices)]
        cfg = srm.SrmConfig(k=3, iterations=6, seed=5)
        serial = srm.fit(subjects, cfg, SerialCommunicator())

        comms = create_thread_communicators(2)
        chunks = [subjects[:2], subjects[2:]]
        results = [None, None]
        errors = [None, None]

        def run(rank):
            try:
                results[rank] = srm.fit(chunks[rank], cfg, comms[rank])
            except BaseException as exc:  # noqa: BLE001
                errors[rank] = exc
                comms[rank].abort()

        threads = [threading.Thread(target=run, args=(r,)) for r in (0, 1)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == [None, None]
        assert np.array_equal(results[0].S, serial.S)
        assert np.array_equal(results[1].S, serial.S)
        for i in range(2):
            assert np.array_equal(results[0].W[i], serial.W[i])
            assert np.array_equal(results[1].W[i], serial.W[i + 2])
        assert results[0].rho0 == serial.rho0

    def test_orthogonality_every_iteration(self):
        rng = np.random.default_rng(13)
        subjects = [SubjectData(f"s{i}", rng.standard_normal((15, 10))) for i in range(2)]
        cfg = srm.SrmConfig(k=3, iterations=1, seed=7)
        # run iteration-by-iteration fits to observe every M-step output
        for iters in range(1, 8):
            model = srm.fit(
                subjects, srm.SrmConfig(k=3, iterations=iters, seed=7), SerialCommunicator()
            )
            for W in model.W:
                assert np.max(np.abs(W.T @ W - np.eye(3))) <= 1e-8
            assert all(r > 0 for r in model.rho2)
            assert abs(model.rho0 - float(np.sum(1.0 / model.rho2_all))) <= 1e-12
            assert np.array_equal(model.sigma_s, model.sigma_s.T)
            assert np.all(np.linalg.eigvalsh(model.sigma_s) > 0)

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(14)
        n_subjects, n_voxels, n_trs, k = 2, 15, 12, 3
        Xhats = [
            srm.demean(rng.standard_normal((n_voxels, n_trs)))[0]
            for _ in range(n_subjects)
        ]
        cfg = srm.SrmConfig(k=k, seed=11)
        Ws = [srm.init_subject(n_voxels, cfg, i)[0] for i in range(n_subjects)]
        rho2 = [1.0] * n_subjects
        sigma_s = np.eye(k)
        lls = [reference.naive_log_likelihood(Ws, rho2, sigma_s, Xhats)]
        for _ in range(20):
            reduced = sum(srm.e_step_local(Ws[i], rho2[i], Xhats[i]) for i in range(n_subjects))
            rho0 = sum(1.0 / r for r in rho2)
            S, _ = srm.e_step_global(reduced, sigma_s, rho0)
            sigma_s, trace = srm.update_sigma_s(sigma_s, rho0, S)
            for i in range(n_subjects):
                Ws[i], rho2[i] = srm.m_step_subject(Xhats[i], S, trace)
            lls.append(reference.naive_log_likelihood(Ws, rho2, sigma_s, Xhats))
        assert np.all(np.diff(lls) >= -1e-9)

    def test_tolerance_stop(self):
        matrices, _ = srm_subjects(n_subjects=2, n_voxels=20, n_trs=10, k=2, seed=3)
        subjects = [SubjectData(f"s{i}", X) for i, X in enumerate(matrices)]
        cfg = srm.SrmConfig(k=2, iterations=50, seed=1, tolerance=1e-8)
        model = srm.fit(subjects, cfg, SerialCommunicator())
        assert len(model.objective_trace) < 50

    def test_unequal_trs_rejected(self):
        subjects = [
            SubjectData("a", np.zeros((5, 4))),
            SubjectData("b", np.zeros((5, 6))),
        ]
        with pytest.raises(ShapeError):
            srm.fit(subjects, srm.SrmConfig(k=2), SerialCommunicator())

    def test_cross_rank_shape_mismatch_is_contract_error(self):
        from factorfit.errors import CollectiveContractError

        rng = np.random.default_rng(20)
        chunks = [
            [SubjectData("a", rng.standard_normal((10, 6)))],
            [SubjectData("b", rng.standard_normal((10, 9)))],  # different TRs
        ]
        cfg = srm.SrmConfig(k=2, iterations=2, seed=0)
        comms = create_thread_communicators(2, timeout=10.0)
        errors = [None, None]

        def run(rank):
            try:
                srm.fit(chunks[rank], cfg, comms[rank])
            except BaseException as exc:  # noqa: BLE001
                errors[rank] = exc
                comms[rank].abort()

        threads = [threading.Thread(target=run, args=(r,)) for r in (0, 1)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert any(isinstance(e, CollectiveContractError) for e in errors)


class TestCommunicationVolume:
    def test_reduce_payload_independent_of_voxels(self):
        """Per-iteration communication is K*T-scale, never voxel-scale."""
        k, n_trs, iters = 3, 10, 4

        def gathered_bytes(n_voxels):
            rng = np.random.default_rng(0)
            subjects = [
                SubjectData(f"s{i}", rng.standard_normal((n_voxels, n_trs)))
                for i in range(2)
            ]
            comm = SerialCommunicator()
            srm.fit(subjects, srm.SrmConfig(k=k, iterations=iters, seed=0), comm)
            return comm.stats.gather_bytes, comm.stats.bcast_bytes

        small = gathered_bytes(25)
        large = gathered_bytes(400)
        assert small == large
        # per-iteration payload: 2 subjects x (index + rho2 + K*T floats)
        per_iter = 2 * (8 + 8 + k * n_trs * 8) + 8
        assert small[0] <= (iters + 1) * per_iter + 64


class TestProjection:
    @pytest.fixture
    def fitted(self):
        matrices, _ = srm_subjects(n_subjects=2, n_voxels=6, n_trs=12, k=2, seed=8)
        subjects = [SubjectData(f"s{i}", X) for i, X in enumerate(matrices)]
        return srm.fit(subjects, srm.SrmConfig(k=2, iterations=5, seed=2), SerialCommunicator())

    def test_mean_projects_to_zero(self, fitted):
        out = srm.project(fitted, 0, fitted.mu[0])
        assert np.max(np.abs(out)) == 0.0

    def test_square_mapping_roundtrip(self):
        rng = np.random.default_rng(15)
        k = 4
        W_true = polar_orthogonal(rng.standard_normal((k, k)))
        X = W_true @ rng.standard_normal((k, 9))
        model = srm.fit(
            [SubjectData("s0", X)],
            srm.SrmConfig(k=k, iterations=3, seed=4),
            SerialCommunicator(),
        )
        x = rng.standard_normal(k)
        assert np.max(np.abs(srm.map_between(model, 0, 0, x) - x)) <= 1e-10

    def test_tall_mapping_idempotent(self, fitted):
        rng = np.random.default_rng(16)
        x = rng.standard_normal(6)
        once = srm.map_between(fitted, 0, 0, x)
        twice = srm.map_between(fitted, 0, 0, once)
        assert np.max(np.abs(twice - once)) <= 1e-10

    def test_index_out_of_range(self, fitted):
        with pytest.raises(IndexError):
            srm.project(fitted, 5, np.zeros(6))


class TestMemoryContract:
    def test_no_voxel_scale_allocation_in_e_step(self):
        """K x K / K x T working set regardless of voxel count."""
        import tracemalloc

        rng = np.random.default_rng(17)
        n_subjects, n_voxels, k, n_trs = 4, 5000, 6, 30
        cfg = srm.SrmConfig(k=k, seed=0)
        Xhats = [
            srm.demean(rng.standard_normal((n_voxels, n_trs)))[0]
            for _ in range(n_subjects)
        ]
        Ws = [srm.init_subject(n_voxels, cfg, i)[0] for i in range(n_subjects)]
        sigma_s = np.eye(k)
        tracemalloc.start()
        reduced = srm.e_step_local(Ws[0], 1.0, Xhats[0])
        for i in range(1, n_subjects):
            reduced += srm.e_step_local(Ws[i], 1.0, Xhats[i])
        S, var_s = srm.e_step_global(reduced, sigma_s, float(n_subjects))
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert S.shape == (k, n_trs) and var_s.shape == (k, k)
        # V x V would be 200 MB; the actual working set is a few K x T blocks
        assert peak < 4 * n_voxels * k * 8
