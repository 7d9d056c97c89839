import numpy as np
import pytest

from gibbsnet.network import (
    CheckpointError,
    LayerParams,
    init_layer,
    init_model_params,
    lipschitz_linear_forward,
    load_checkpoint,
    load_model,
    model_lipschitz_product,
    power_iterate,
    save_checkpoint,
    save_model,
    softplus_np,
)


class TestPowerIteration:
    def test_two_iterations_within_5pct_of_oracle(self):
        # the layer protocol: u is persistent (warm-started at init, advanced
        # every training forward); 2 iterations from that state must track a
        # 50-iteration oracle.  From a cold random u, 2 iterations can be 40%
        # off, which is why the persistent vector exists in the first place.
        rng = np.random.default_rng(2024)
        for _ in range(100):
            out_dim = int(rng.integers(2, 99))
            in_dim = int(rng.integers(2, 97))
            W = rng.normal(size=(out_dim, in_dim))
            u0 = rng.normal(size=out_dim)
            u0 /= np.linalg.norm(u0)
            u_persistent, _, _ = power_iterate(W, u0, 15)  # init warm start
            _, _, fast = power_iterate(W, u_persistent.copy(), 2)
            _, _, oracle = power_iterate(W, u_persistent.copy(), 50)
            svd = np.linalg.svd(W, compute_uv=False)[0]
            assert oracle == pytest.approx(svd, rel=1e-2)
            assert fast <= oracle * (1.0 + 1e-12)  # Rayleigh quotient lower bound
            assert fast >= 0.95 * oracle

    def test_converged_u_is_stationary(self):
        rng = np.random.default_rng(3)
        W = rng.normal(size=(10, 8))
        u, v, s1 = power_iterate(W, rng.normal(size=10), 50)
        u2, _, s2 = power_iterate(W, u.copy(), 2)
        assert s2 == pytest.approx(s1, rel=1e-12)
        assert np.allclose(u, u2, atol=1e-10)


class TestLipschitzLinearForward:
    def test_identity_weight_unit_constant(self):
        rng = np.random.default_rng(0)
        layer = init_layer(rng, 4, 4)
        layer.W_raw = np.eye(4)
        x = rng.normal(size=4)
        y = lipschitz_linear_forward(layer, x)
        # sigma(I) = 1 and softplus(c*) = 1 at init
        assert np.allclose(y, x + layer.bias, atol=1e-12)

    def test_zero_lipschitz_bound_collapses_to_bias(self):
        rng = np.random.default_rng(1)
        layer = init_layer(rng, 6, 5)
        layer.c_star = np.array(-1e3)
        x = rng.normal(size=5)
        assert np.allclose(lipschitz_linear_forward(layer, x), layer.bias, atol=1e-12)

    def test_scaled_norm_respects_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            layer = init_layer(rng, 5, 5)
            layer.W_raw = rng.normal(size=(5, 5))
            layer.u, _, _ = power_iterate(layer.W_raw, layer.u, 15)  # re-warm
            layer.c_star = np.array(rng.normal())
            _, _, sigma2 = power_iterate(layer.W_raw, layer.u.copy(), 2)
            _, _, sigma50 = power_iterate(layer.W_raw, layer.u.copy(), 50)
            W_scaled = layer.W_raw * (softplus_np(layer.c_star) / sigma2)
            norm = np.linalg.svd(W_scaled, compute_uv=False)[0]
            eps = sigma50 / sigma2 - 1.0  # 2-iteration underestimate
            assert norm <= float(softplus_np(layer.c_star)) * (1.0 + eps) * (1.0 + 1e-6)
            assert norm <= float(softplus_np(layer.c_star)) * 1.06

    def test_training_updates_u_inference_does_not(self):
        rng = np.random.default_rng(5)
        layer = init_layer(rng, 6, 6)
        u_before = layer.u.copy()
        lipschitz_linear_forward(layer, rng.normal(size=6), training=False)
        assert np.array_equal(layer.u, u_before)
        lipschitz_linear_forward(layer, rng.normal(size=6), training=True)
        assert not np.array_equal(layer.u, u_before)


class TestLipschitzProduct:
    def test_unit_at_init(self):
        params = init_model_params(8, seed=0)
        assert model_lipschitz_product(params) == pytest.approx(1.0, abs=1e-12)

    def test_collapsed_layer_zeroes_product(self):
        params = init_model_params(8, seed=0)
        params.mix_net[0].c_star = np.array(-1e3)
        assert model_lipschitz_product(params) == 0.0

    def test_five_layers_at_two(self):
        params = init_model_params(8, seed=0)
        c2 = np.log(np.expm1(2.0))
        for layer in params.layers():
            layer.c_star = np.array(c2)
        assert model_lipschitz_product(params) == pytest.approx(32.0, rel=1e-12)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        params = init_model_params(16, seed=9)
        p1 = tmp_path / "m1.ckpt"
        p2 = tmp_path / "m2.ckpt"
        save_model(params, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checksum_failure(self, tmp_path):
        params = init_model_params(16, seed=9)
        path = tmp_path / "m.ckpt"
        save_model(params, path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_model(path)

    def test_magic_mismatch(self, tmp_path):
        params = init_model_params(16, seed=9)
        path = tmp_path / "m.ckpt"
        save_model(params, path)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path, b"SLLE")

    def test_loaded_values_exact(self, tmp_path):
        params = init_model_params(16, seed=1)
        path = tmp_path / "m.ckpt"
        save_model(params, path)
        back = load_model(path)
        for a, b in zip(params.layers(), back.layers()):
            assert np.array_equal(a.W_raw, b.W_raw)
            assert np.array_equal(a.bias, b.bias)
            assert np.array_equal(a.c_star, b.c_star)
            assert np.array_equal(a.u, b.u)
        assert np.array_equal(params.emb_mean, back.emb_mean)
        assert back.T_mean == params.T_mean

    def test_plain_layers_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        layers = [init_layer(rng, 8, 5, lipschitz=False),
                  init_layer(rng, 2, 8, lipschitz=True)]
        path = tmp_path / "s.ckpt"
        save_checkpoint(path, b"SLLE", layers, 101, [])
        dim, back, scalers = load_checkpoint(path, b"SLLE")
        assert dim == 101 and scalers == []
        assert not back[0].lipschitz and back[1].lipschitz
        assert np.array_equal(back[0].W_raw, layers[0].W_raw)
