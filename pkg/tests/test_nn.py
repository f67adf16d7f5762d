import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slugvae import nn
from slugvae.errors import ConfigurationError, LoadError, NumericError
from slugvae.fixtures import conv_spec, mlp_spec, randomize_batchnorm, random_params
from slugvae.nn import (BatchNorm, Conv2d, Dense, ELU, Flatten, NetworkSpec, ParamVector, Reshape, Residual,
                        Upsample)
from slugvae.oracle import finite_diff_jacobian


def _conv_ref(x, w, b, stride, pad):
    """Direct nested-loop convolution; w is (k, k, in, out)."""
    n, h, wd, c = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k, :]
            out[:, i, j, :] = np.einsum("nabc,abco->no", patch, w) + b
    return out


class TestParamVector:
    def test_round_trip_bitwise(self, rng):
        net = conv_spec()
        arrays = [rng.standard_normal(r.shape) for r in net.layout]
        pv = nn.flatten(arrays, net.layout)
        back = nn.unflatten(pv.values, net.layout)
        assert all(np.array_equal(a, b) for a, b in zip(arrays, back))
        assert np.array_equal(nn.flatten(back, net.layout).values, pv.values)

    def test_length_is_sum_of_records(self):
        net = conv_spec()
        assert net.num_params == sum(r.size for r in net.layout)
        assert len(nn.init_params(net, 0)) == net.num_params

    def test_layouts_deterministic(self):
        assert conv_spec().layout == conv_spec().layout

    def test_length_mismatch_rejected(self):
        net = mlp_spec()
        with pytest.raises(ConfigurationError):
            ParamVector(np.zeros(net.num_params + 1), net.layout)

    def test_save_load_round_trip(self, tmp_path, rng):
        net = mlp_spec()
        pv = random_params(net, 3)
        nn.save_params(tmp_path / "p.params", pv)
        back = nn.load_params(tmp_path / "p.params", net)
        assert np.array_equal(back.values, pv.values)

    def test_load_rejects_bad_magic(self, tmp_path):
        (tmp_path / "bad.params").write_bytes(b"NOTPARAM" + bytes(32))
        with pytest.raises(LoadError):
            nn.load_params(tmp_path / "bad.params")


class TestNetworkSpec:
    def test_text_round_trip(self):
        net = randomize_batchnorm(conv_spec(), 0)
        back = NetworkSpec.from_text(net.to_text())
        assert back == net
        assert back.to_text() == net.to_text()

    def test_shapes_compose(self):
        net = conv_spec((6, 6, 2))
        assert net.shapes[0] == (6, 6, 2)
        assert net.output_shape == (6, 6, 1)

    def test_incompatible_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec((4,), [Reshape((3, 2))])


class TestForward:
    def test_empty_network_is_identity(self, rng):
        net = NetworkSpec((3, 3, 2), [])
        x = rng.standard_normal((3, 3, 2))
        assert np.array_equal(nn.forward(net, nn.init_params(net, 0), x), x)

    def test_zero_dense_gives_zero(self, rng):
        net = NetworkSpec((5,), [Dense(3)])
        out = nn.forward(net, nn.init_params(net, 0).zeros_like(), rng.standard_normal(5))
        assert np.array_equal(out, np.zeros(3))

    def test_two_layer_matches_scalar_oracle(self, rng):
        net = NetworkSpec((4,), [Dense(3), ELU(), Dense(2)])
        params = random_params(net, 7)
        W1, b1, W2, b2 = params.unflatten()
        x = rng.standard_normal(4)
        h = []
        for i in range(3):
            a = b1[i] + sum(W1[i, j] * x[j] for j in range(4))
            h.append(a if a > 0 else np.expm1(a))
        y = [b2[o] + sum(W2[o, i] * h[i] for i in range(3)) for o in range(2)]
        np.testing.assert_allclose(nn.forward(net, params, x), y, rtol=1e-14)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_matches_loop_reference(self, rng, stride):
        net = NetworkSpec((7, 6, 2), [Conv2d(3, stride=stride)])
        params = random_params(net, 1)
        w, b = params.unflatten()
        x = rng.standard_normal((2, 7, 6, 2))
        np.testing.assert_allclose(nn.forward(net, params, x), _conv_ref(x, w, b, stride, 1), atol=1e-13)

    def test_upsample_nearest(self):
        net = NetworkSpec((2, 2, 1), [Upsample(2)])
        x = np.arange(4.0).reshape(2, 2, 1)
        out = nn.forward(net, nn.init_params(net, 0), x)[:, :, 0]
        assert np.array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_batchnorm_eval_is_affine(self, rng):
        bn = BatchNorm(mean=np.array([1.0, -2.0]), var=np.array([4.0, 0.25]))
        net = NetworkSpec((3, 2), [bn])
        params = nn.flatten([np.array([2.0, 3.0]), np.array([0.5, -1.0])], net.layout)
        x = rng.standard_normal((3, 2))
        expect = (x - bn.mean) / np.sqrt(bn.var + bn.eps) * [2.0, 3.0] + [0.5, -1.0]
        np.testing.assert_allclose(nn.forward(net, params, x), expect, rtol=1e-14)

    def test_non_finite_reported_with_layer(self):
        net = NetworkSpec((2,), [Dense(2), ELU()])
        params = nn.init_params(net, 0)
        with pytest.raises(NumericError, match="layer"):
            nn.forward(net, params, np.array([np.inf, 0.0]))


class TestVJP:
    def test_zero_cotangent(self, rng):
        net = conv_spec()
        params = random_params(net, 0)
        g = nn.vjp(net, params, rng.standard_normal(net.input_shape), np.zeros(net.output_shape))
        assert np.array_equal(g.values, np.zeros(net.num_params))

    def test_dense_outer_product(self, rng):
        net = NetworkSpec((4,), [Dense(3)])
        params = random_params(net, 0)
        x, u = rng.standard_normal(4), rng.standard_normal(3)
        gW, gb = nn.vjp(net, params, x, u).unflatten()
        np.testing.assert_allclose(gW, np.outer(u, x), rtol=1e-15)
        np.testing.assert_allclose(gb, u, rtol=1e-15)

    @pytest.mark.parametrize("make", [mlp_spec, conv_spec])
    def test_rows_match_finite_differences(self, rng, make):
        net = randomize_batchnorm(make(), 2)
        params = random_params(net, 5)
        x = rng.standard_normal(net.input_shape)
        n_out = int(np.prod(net.output_shape))
        rows = np.stack([nn.vjp(net, params, x, np.eye(n_out)[j].reshape(net.output_shape)).values
                         for j in range(n_out)])
        fd = finite_diff_jacobian(lambda t: nn.forward(net, ParamVector(t, net.layout), x), params)
        assert np.linalg.norm(rows - fd) / np.linalg.norm(fd) < 1e-4

    def test_linearity(self, rng):
        net = randomize_batchnorm(conv_spec(), 1)
        params = random_params(net, 1)
        x = rng.standard_normal(net.input_shape)
        u, w = rng.standard_normal((2,) + net.output_shape)
        lhs = nn.vjp(net, params, x, 2.5 * u - 0.75 * w).values
        rhs = 2.5 * nn.vjp(net, params, x, u).values - 0.75 * nn.vjp(net, params, x, w).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.abs(rhs).max()))

    def test_per_example_sums_to_batch(self, rng):
        net = randomize_batchnorm(conv_spec(), 3)
        params = random_params(net, 3)
        lin = nn.Linearization(net, params, rng.standard_normal((3,) + net.input_shape))
        u = rng.standard_normal(lin.output.shape)
        np.testing.assert_allclose(lin.vjp(u, per_example=True).sum(axis=0), lin.vjp(u), atol=1e-12)


class TestJVP:
    def test_zero_tangent(self, rng):
        net = conv_spec()
        params = random_params(net, 0)
        out = nn.jvp(net, params, rng.standard_normal(net.input_shape), np.zeros(net.num_params))
        assert np.array_equal(out, np.zeros(net.output_shape))

    def test_dense_weight_tangent(self, rng):
        net = NetworkSpec((4,), [Dense(3)])
        params = random_params(net, 0)
        x, dW = rng.standard_normal(4), rng.standard_normal((3, 4))
        t = nn.flatten([dW, np.zeros(3)], net.layout)
        np.testing.assert_allclose(nn.jvp(net, params, x, t), dW @ x, rtol=1e-14)

    @pytest.mark.parametrize("make", [mlp_spec, conv_spec])
    def test_adjointness(self, rng, make):
        net = randomize_batchnorm(make(), 4)
        params = random_params(net, 4)
        lin = nn.Linearization(net, params, rng.standard_normal((2,) + net.input_shape))
        for _ in range(10):
            v = rng.standard_normal(net.num_params)
            u = rng.standard_normal(lin.output.shape)
            jv = lin.jvp(v)
            gap = abs(np.sum(jv * u) - v @ lin.vjp(u))
            assert gap <= 1e-10 * (np.linalg.norm(jv) * np.linalg.norm(u) + 1)

    def test_batched_tangents_match_loop(self, rng):
        net = randomize_batchnorm(conv_spec(), 6)
        params = random_params(net, 6)
        xs = rng.standard_normal((3,) + net.input_shape)
        T = rng.standard_normal((3, net.num_params))
        lin = nn.Linearization(net, params, xs)
        loop = np.stack([nn.jvp(net, params, xs[i], T[i]) for i in range(3)])
        np.testing.assert_allclose(lin.jvp(T), loop, atol=1e-12)


class TestInit:
    def test_same_seed_identical(self):
        net = conv_spec()
        assert np.array_equal(nn.init_params(net, 9).values, nn.init_params(net, 9).values)

    def test_different_seed_differs(self):
        net = conv_spec()
        assert not np.array_equal(nn.init_params(net, 1).values, nn.init_params(net, 2).values)

    def test_dense_variance_is_inverse_fan_in(self):
        net = NetworkSpec((100,), [Dense(100)])
        w = nn.init_params(net, 0).unflatten()[0]
        assert w.size == 10_000
        assert abs(w.var() * 100 - 1.0) < 0.2

    def test_conv_fan_in(self):
        net = NetworkSpec((8, 8, 16), [Conv2d(64)])
        w = nn.init_params(net, 0).unflatten()[0]
        assert abs(w.var() * 3 * 3 * 16 - 1.0) < 0.2


class TestLayerProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_residual_conv_adjointness(self, batch, size, channels, seed):
        net = NetworkSpec((size, size, channels),
                          [Residual([Conv2d(channels), ELU()]), Conv2d(2, stride=2), Flatten(), Dense(3)])
        params = random_params(net, seed % 1000)
        r = np.random.default_rng(seed)
        lin = nn.Linearization(net, params, r.standard_normal((batch,) + net.input_shape))
        v = r.standard_normal(net.num_params)
        u = r.standard_normal(lin.output.shape)
        jv = lin.jvp(v)
        assert abs(np.sum(jv * u) - v @ lin.vjp(u)) <= 1e-10 * (np.linalg.norm(jv) * np.linalg.norm(u) + 1)
