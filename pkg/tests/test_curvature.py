import warnings

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from slugvae import curvature, oracle, uq
from slugvae.curvature import GGNOperator, MatrixOperator, SketchOperator, UncertaintyBasis
from slugvae.errors import ConfigurationError, LoadError, NumericError


@pytest.fixture(scope="module")
def dense_G(tiny, tiny_train):
    return oracle.dense_ggn(tiny[0], tiny_train)


@pytest.fixture(scope="module")
def op(tiny, tiny_train):
    return GGNOperator(tiny[0], tiny_train)


class TestGGN:
    def test_zero_vector(self, op):
        assert np.array_equal(curvature.ggn_vec(op, np.zeros(op.dim)), np.zeros(op.dim))

    def test_symmetric(self, op, rng):
        v, w = rng.standard_normal((2, op.dim))
        a, b = curvature.ggn_vec(op, v) @ w, v @ curvature.ggn_vec(op, w)
        assert abs(a - b) <= 1e-9 * abs(a)

    def test_psd(self, op, rng):
        for _ in range(5):
            v = rng.standard_normal(op.dim)
            assert curvature.ggn_vec(op, v) @ v >= -1e-10 * (v @ v)

    def test_matches_dense(self, op, dense_G, rng):
        v = rng.standard_normal(op.dim)
        gv = curvature.ggn_vec(op, v)
        assert np.linalg.norm(gv - dense_G @ v) <= 1e-8 * np.linalg.norm(dense_G @ v)

    def test_batch_size_irrelevant(self, tiny, tiny_train, op, rng):
        v = rng.standard_normal(op.dim)
        other = GGNOperator(tiny[0], tiny_train, batch_size=3, cache=True)
        np.testing.assert_allclose(curvature.ggn_vec(other, v), curvature.ggn_vec(op, v), rtol=1e-12)

    def test_all_subset_dimension(self, tiny, tiny_train):
        m = tiny[0]
        assert GGNOperator(m, tiny_train, "all").dim == len(m.encoder_params) + len(m.decoder_params)

    def test_wrong_length_rejected(self, op):
        with pytest.raises(ConfigurationError):
            op.matvec(np.zeros(op.dim + 1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_sample(self, tiny, tiny_train):
        bad = tiny_train.copy()
        bad[5, 0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="sample 5"):
            GGNOperator(tiny[0], bad).matvec(np.ones(len(tiny[0].decoder_params)))


class TestLanczos:
    def test_diagonal_stub(self):
        state = curvature.lanczos(MatrixOperator(np.diag([3.0, 2.0, 1.0])), 3, seed=0)
        vals, _ = curvature.tridiagonal_eigh(state.alphas, state.betas)
        np.testing.assert_allclose(vals, [3, 2, 1], atol=1e-10)

    def test_rank_one_terminates(self, rng):
        v = rng.standard_normal(6)
        state = curvature.lanczos(MatrixOperator(np.outer(v, v)), 3, seed=0, start=v)
        assert state.terminated and state.steps == 1
        assert state.last_beta <= 1e-10 * (v @ v)
        assert state.alphas[0] == pytest.approx(v @ v, rel=1e-12)

    def test_rank_one_random_start(self, rng):
        v = rng.standard_normal(6)
        state = curvature.lanczos(MatrixOperator(np.outer(v, v)), 3, seed=0)
        assert state.terminated and state.steps == 2
        vals, _ = curvature.tridiagonal_eigh(state.alphas, state.betas)
        assert vals[0] == pytest.approx(v @ v, rel=1e-12)

    def test_top_ritz_values(self, op, dense_G):
        vals, _ = oracle.dense_eigh(dense_G)
        basis = curvature.build_basis(curvature.lanczos(op, 20, seed=0), 5)
        np.testing.assert_allclose(basis.ritz_values, vals[:5], rtol=1e-6)

    def test_betas_non_negative(self, tiny_state):
        assert np.all(tiny_state.betas >= 0)
        assert tiny_state.betas.size == tiny_state.steps - 1

    def test_three_term_relation(self, tiny_state, dense_G):
        Q, a, b = tiny_state.basis, tiny_state.alphas, tiny_state.betas
        norm = np.linalg.norm(dense_G, 2)
        for j in range(1, tiny_state.steps - 1):
            r = dense_G @ Q[:, j] - b[j - 1] * Q[:, j - 1] - a[j] * Q[:, j] - b[j] * Q[:, j + 1]
            assert np.linalg.norm(r) <= 1e-6 * norm

    def test_exact_basis_orthonormal(self, tiny_state):
        Q = tiny_state.basis
        assert np.max(np.abs(Q.T @ Q - np.eye(Q.shape[1]))) <= 1e-10

    def test_deterministic(self, op):
        a, b = curvature.lanczos(op, 5, seed=3), curvature.lanczos(op, 5, seed=3)
        assert np.array_equal(a.alphas, b.alphas) and np.array_equal(a.basis, b.basis)

    def test_sketched_stores_sketch(self, op):
        sk = SketchOperator(50, op.dim, seed=1)
        state = curvature.lanczos(op, 6, seed=0, mode="sketched", sketch=sk)
        exact = curvature.lanczos(op, 6, seed=0)
        assert state.basis.shape == (50, 6)
        np.testing.assert_allclose(state.basis[:, 0], sk.apply(exact.basis[:, 0]), atol=1e-14)

    @pytest.mark.parametrize("k", [0, 10_000])
    def test_bad_k(self, op, k):
        with pytest.raises(ConfigurationError):
            curvature.lanczos(op, k, seed=0)

    def test_bad_mode(self, op):
        with pytest.raises(ConfigurationError):
            curvature.lanczos(op, 3, seed=0, mode="dense")


class TestSketch:
    def test_zero(self):
        assert np.array_equal(curvature.sketch_apply(SketchOperator(8, 30, 0), np.zeros(30)), np.zeros(8))

    def test_linear(self, rng):
        sk = SketchOperator(16, 9000, seed=4, block=1000)
        v, w = rng.standard_normal((2, 9000))
        lhs = sk.apply(1.5 * v - 2.0 * w)
        np.testing.assert_allclose(lhs, 1.5 * sk.apply(v) - 2.0 * sk.apply(w), atol=1e-12)

    def test_norm_unbiased(self, rng):
        sk = SketchOperator(512, 10_000, seed=0)
        V = rng.standard_normal((10_000, 200))
        V /= np.linalg.norm(V, axis=0)
        assert abs(np.mean(np.sum(sk.apply(V) ** 2, axis=0)) - 1.0) < 0.05

    def test_deterministic_in_seed(self, rng):
        v = rng.standard_normal(100)
        assert np.array_equal(SketchOperator(10, 100, 7).apply(v), SketchOperator(10, 100, 7).apply(v))
        assert not np.array_equal(SketchOperator(10, 100, 7).apply(v), SketchOperator(10, 100, 8).apply(v))

    def test_block_size_irrelevant(self, rng):
        v = rng.standard_normal(300)
        a = SketchOperator(10, 300, 7, block=64).materialize()
        assert a.shape == (10, 300)
        np.testing.assert_allclose(SketchOperator(10, 300, 7, block=64).apply(v), a @ v, atol=1e-13)

    def test_transpose_is_adjoint(self, rng):
        sk = SketchOperator(12, 500, 3, block=128)
        v, y = rng.standard_normal(500), rng.standard_normal(12)
        assert sk.apply(v) @ y == pytest.approx(v @ sk.apply_transpose(y), rel=1e-12)

    def test_entries(self):
        S = SketchOperator(9, 40, 0).materialize()
        np.testing.assert_allclose(np.abs(S), 1 / 3)

    def test_default_dim(self):
        assert curvature.default_sketch_dim(10, 1000) == int(np.ceil(40 * np.log(1000)))


class TestBuildBasis:
    def test_empty(self, tiny_state):
        b = curvature.build_basis(tiny_state, 0)
        assert b.rank == 0 and b.columns.shape == (tiny_state.basis.shape[0], 0)

    def test_orthonormal(self, tiny_basis):
        assert tiny_basis.orthonormality_error() <= 1e-8

    def test_ritz_descending(self, tiny_basis):
        assert np.all(np.diff(tiny_basis.ritz_values) <= 0)

    def test_span_matches_oracle(self, tiny_state, dense_G):
        vals, vecs = oracle.dense_eigh(dense_G)
        for k in (3, 5, 10):
            if vals[k - 1] - vals[k] <= 1e-6:
                continue
            U = curvature.build_basis(tiny_state, k).columns
            assert np.max(subspace_angles(U, vecs[:, :k])) < 1e-3

    def test_more_than_steps_warns(self):
        state = curvature.lanczos(MatrixOperator(np.diag([2.0, 1.0, 0.0, 0.0])), 4, seed=0)
        with pytest.warns(UserWarning):
            b = curvature.build_basis(state, 4)
        assert b.truncated and b.rank == state.steps

    def test_sketched_basis_orthonormal(self, op):
        sk = SketchOperator(80, op.dim, seed=1)
        b = curvature.build_basis(curvature.lanczos(op, 10, 0, "sketched", sk), 5)
        assert b.mode == "sketched" and b.columns.shape == (80, 5)
        assert b.orthonormality_error() <= 1e-8
        assert b.sketch.seed == 1

    def test_nested_truncation(self, tiny_basis, tiny_state):
        assert np.array_equal(tiny_basis.truncate(4).columns, tiny_basis.columns[:, :4])
        np.testing.assert_allclose(curvature.build_basis(tiny_state, 4).columns, tiny_basis.columns[:, :4])

    def test_full_range_annihilates_training_rows(self, tiny, tiny_train):
        m = tiny[0]
        J = np.vstack([oracle.dense_jacobian(m, x) for x in tiny_train])
        _, s, vt = np.linalg.svd(J, full_matrices=False)
        rank = int(np.sum(s > 1e-12 * s[0]))
        basis = UncertaintyBasis("exact", vt[:rank].T, s[:rank] ** 2, J.shape[1])
        for x in tiny_train[:3]:
            assert uq.slug_exhaustive(x, m, basis) < 1e-8


class TestFitBasis:
    def test_pipeline_shapes(self, tiny, tiny_train):
        b = curvature.fit_basis(tiny[0], tiny_train, k=8, k_keep=4, seed=0)
        assert b.rank == 4 and b.n_curvature == 8 and b.subset == "decoder"

    def test_sketched_default_size(self, tiny, tiny_train):
        b = curvature.fit_basis(tiny[0], tiny_train, k=8, k_keep=4, seed=0, mode="sketched")
        assert b.sketch_dim == curvature.default_sketch_dim(4, len(tiny[0].decoder_params))


class TestBasisIO:
    def test_round_trip(self, tmp_path, tiny_basis):
        curvature.save_basis(tmp_path / "b.slug", tiny_basis)
        back = curvature.load_basis(tmp_path / "b.slug")
        assert np.array_equal(back.columns, tiny_basis.columns)
        assert np.array_equal(back.ritz_values, tiny_basis.ritz_values)
        assert (back.mode, back.param_dim, back.subset) == (tiny_basis.mode, tiny_basis.param_dim, tiny_basis.subset)

    def test_sketched_round_trip(self, tmp_path, op):
        sk = SketchOperator(40, op.dim, seed=99)
        b = curvature.build_basis(curvature.lanczos(op, 6, 0, "sketched", sk), 3, n_curvature=8)
        curvature.save_basis(tmp_path / "s.slug", b)
        back = curvature.load_basis(tmp_path / "s.slug")
        assert back.sketch_seed == 99 and back.n_curvature == 8
        assert np.array_equal(back.columns, b.columns)

    def test_bad_magic(self, tmp_path, tiny_basis):
        curvature.save_basis(tmp_path / "b.slug", tiny_basis)
        raw = bytearray((tmp_path / "b.slug").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "b.slug").write_bytes(bytes(raw))
        with pytest.raises(LoadError):
            curvature.load_basis(tmp_path / "b.slug")

    def test_bad_version(self, tmp_path, tiny_basis):
        curvature.save_basis(tmp_path / "b.slug", tiny_basis)
        raw = bytearray((tmp_path / "b.slug").read_bytes())
        raw[8] = 7
        (tmp_path / "b.slug").write_bytes(bytes(raw))
        with pytest.raises(LoadError, match="version"):
            curvature.load_basis(tmp_path / "b.slug")

    def test_truncated_file(self, tmp_path, tiny_basis):
        curvature.save_basis(tmp_path / "b.slug", tiny_basis)
        raw = (tmp_path / "b.slug").read_bytes()
        (tmp_path / "b.slug").write_bytes(raw[:-8])
        with pytest.raises(LoadError):
            curvature.load_basis(tmp_path / "b.slug")

    def test_score_bit_identical_after_load(self, tmp_path, tiny, tiny_x, tiny_basis):
        curvature.save_basis(tmp_path / "b.slug", tiny_basis)
        back = curvature.load_basis(tmp_path / "b.slug")
        probes = uq.ProbeConfig(16)
        assert uq.slug_score(tiny_x, tiny[0], back, probes) == uq.slug_score(tiny_x, tiny[0], tiny_basis, probes)
