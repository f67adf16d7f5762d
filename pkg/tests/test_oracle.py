import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slugvae import oracle
from slugvae.curvature import UncertaintyBasis
from slugvae.errors import OracleRefusal
from slugvae.vae import ReconstructionMap


@pytest.fixture(scope="module")
def model(tiny):
    return tiny[0]


class TestCaps:
    def test_param_cap(self, model, tiny_x):
        with pytest.raises(OracleRefusal):
            oracle.dense_jacobian(model, tiny_x, max_params=100)

    def test_ggn_cap(self, model, tiny_train):
        with pytest.raises(OracleRefusal):
            oracle.dense_ggn(model, tiny_train, "all", max_params=1000)

    def test_fd_cap(self):
        with pytest.raises(OracleRefusal):
            oracle.finite_diff_gradient(lambda t: 0.0, np.zeros(10), max_params=5)

    def test_projector_cap(self):
        with pytest.raises(OracleRefusal):
            oracle.projector_matrix(UncertaintyBasis("exact", np.zeros((5000, 0)), np.zeros(0), 5000))


class TestDenseJacobian:
    def test_shape(self, model, tiny_x):
        J = oracle.dense_jacobian(model, tiny_x)
        assert J.shape == (64, len(model.decoder_params))

    def test_zero_gradient_layers(self, model, tiny_x):
        m = model.copy()
        last = m.decoder_params.layout[-2]
        assert last.name.endswith("conv2d.weight")
        tail = last.size + m.decoder_params.layout[-1].size
        m.decoder_params.values[-tail:-m.decoder_params.layout[-1].size] = 0.0
        J = oracle.dense_jacobian(m, tiny_x)
        assert np.all(J[:, :-tail] == 0)
        assert np.all(J[:, -1] != 0)

    def test_matches_jvp(self, model, tiny_x, rng):
        J = oracle.dense_jacobian(model, tiny_x, "all")
        rm = ReconstructionMap(model, tiny_x[None], "all")
        v = rng.standard_normal(J.shape[1])
        jv = rm.jvp(v).ravel()
        assert np.linalg.norm(J @ v - jv) <= 1e-10 * np.linalg.norm(jv)

    def test_matches_finite_differences(self, model, tiny_x):
        J = oracle.dense_jacobian(model, tiny_x)

        def out(theta):
            m = model.copy()
            m.decoder_params.values[:] = theta
            return ReconstructionMap(m, tiny_x[None]).output

        fd = oracle.finite_diff_jacobian(out, model.decoder_params)
        assert np.linalg.norm(J - fd) <= 1e-4 * np.linalg.norm(J)


class TestDenseGGN:
    def test_empty_dataset(self, model):
        G = oracle.dense_ggn(model, np.zeros((0,) + model.image_shape))
        p = len(model.decoder_params)
        assert G.shape == (p, p) and not G.any()

    def test_sum_of_outer_products(self, model, tiny_train):
        G = oracle.dense_ggn(model, tiny_train[:3])
        ref = sum(J.T @ J for J in (oracle.dense_jacobian(model, x) for x in tiny_train[:3]))
        np.testing.assert_allclose(G, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())

    def test_symmetric_psd(self, model, tiny_train):
        G = oracle.dense_ggn(model, tiny_train[:2])
        assert np.array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() >= -1e-10 * np.abs(G).max()


class TestDenseEigh:
    def test_identity(self):
        vals, _ = oracle.dense_eigh(np.eye(4))
        np.testing.assert_allclose(vals, 1.0)

    def test_diagonal(self):
        vals, vecs = oracle.dense_eigh(np.diag([1.0, 3.0, 2.0]))
        np.testing.assert_allclose(vals, [3, 2, 1])
        np.testing.assert_allclose(np.abs(vecs), np.eye(3)[:, [1, 2, 0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2**31))
    def test_reconstruction(self, n, seed):
        B = np.random.default_rng(seed).standard_normal((n, n))
        A = B + B.T
        vals, vecs = oracle.dense_eigh(A)
        assert np.max(np.abs(A - (vecs * vals) @ vecs.T)) <= 1e-8 * np.abs(A).max()
        assert np.linalg.norm(A @ vecs - vecs * vals) <= 1e-8 * np.linalg.norm(A, 2) * np.sqrt(n)
        assert np.all(np.diff(vals) <= 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            oracle.dense_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestExactTrace:
    def test_empty_basis(self, model, tiny_x):
        p = len(model.decoder_params)
        trace, diag = oracle.exact_trace_and_diag(model, tiny_x, UncertaintyBasis("exact", np.zeros((p, 0)), np.zeros(0), p))
        J = oracle.dense_jacobian(model, tiny_x)
        assert trace == pytest.approx(np.sum(J**2), rel=1e-12)
        assert trace == pytest.approx(diag.sum(), rel=1e-12)

    def test_full_basis(self, model, tiny_x):
        p = len(model.decoder_params)
        trace, _ = oracle.exact_trace_and_diag(model, tiny_x, UncertaintyBasis("exact", np.eye(p), np.ones(p), p))
        assert abs(trace) < 1e-8

    def test_matches_product(self, model, tiny_x, tiny_basis):
        trace, diag = oracle.exact_trace_and_diag(model, tiny_x, tiny_basis)
        J = oracle.dense_jacobian(model, tiny_x)
        U = tiny_basis.columns
        M = J @ J.T - (J @ U) @ (J @ U).T
        assert abs(trace - np.trace(M)) <= 1e-10 * np.trace(M)
        np.testing.assert_allclose(diag, np.diag(M), rtol=1e-8, atol=1e-12 * np.trace(M))


class TestFiniteDifferences:
    def test_quadratic(self, rng):
        theta = rng.standard_normal(12)
        g = oracle.finite_diff_gradient(lambda t: 0.5 * t @ t, theta)
        np.testing.assert_allclose(g, theta, atol=1e-8)

    def test_constant(self):
        assert not oracle.finite_diff_gradient(lambda t: 3.0, np.ones(5)).any()

    def test_jacobian_linear(self, rng):
        A = rng.standard_normal((4, 6))
        np.testing.assert_allclose(oracle.finite_diff_jacobian(lambda t: A @ t, np.zeros(6)), A, atol=1e-9)
