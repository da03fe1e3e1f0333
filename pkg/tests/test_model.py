"""VPE network, loss terms and their oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpe.errors import ConfigError
from vpe.model import (VPE, GaussianLatent, VpeConfig, kl_divergence, loss_gradient_check,
                       reconstruction_loss, reparameterize)


@pytest.fixture(scope="module")
def toy():
    return VPE(VpeConfig.toy(), seed=0)


def warmed(model, seed=0):
    """Run one training-mode pass so batch norm has running statistics."""
    x = np.random.default_rng(seed).random((8, 3, model.config.input_size, model.config.input_size))
    model.loss_and_grad(x, x, rng=np.random.default_rng(seed))
    model.zero_grad()
    return model


class TestConfig:
    def test_defaults(self):
        cfg = VpeConfig()
        assert cfg.latent_dim == 300 and cfg.mc_samples == 1 and cfg.kl_weight == 1.0
        assert cfg.encoder == ((100, 7), (150, 4), (250, 4)) and cfg.target_mode == "prototype"

    @pytest.mark.parametrize("change", [dict(input_size=20), dict(mc_samples=0),
                                        dict(target_mode="other"), dict(encoder=((8, 3),))])
    def test_invalid_rejected(self, change):
        with pytest.raises(ConfigError):
            VpeConfig(**change).validate()


class TestReparameterize:
    def test_zero_noise(self):
        lat = GaussianLatent(np.array([1.0, 2.0]), np.zeros(2))
        np.testing.assert_array_equal(reparameterize(lat, np.zeros(2)), [1.0, 2.0])

    def test_unit_sigma(self):
        assert reparameterize(GaussianLatent(np.zeros(1), np.zeros(1)), np.ones(1))[0] == 1.0

    def test_sample_mean(self):
        rng = np.random.default_rng(0)
        mu, lv = np.array([0.5, -1.0, 2.0]), np.array([0.0, 1.0, -2.0])
        n = 100_000
        z = reparameterize(GaussianLatent(mu[None], lv[None]), rng.standard_normal((n, 3)))
        sigma = np.exp(0.5 * lv)
        assert np.all(np.abs(z.mean(axis=0) - mu) <= 3 * sigma / math.sqrt(n))


class TestKL:
    def test_prior_match_is_zero(self):
        assert kl_divergence(np.zeros((1, 300)), np.zeros((1, 300)))[0] == 0.0

    def test_unit_means(self):
        assert kl_divergence(np.ones((1, 300)), np.zeros((1, 300)))[0] == 150.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=8))
    def test_non_negative(self, pairs):
        mu, lv = np.array(pairs).T
        assert kl_divergence(mu[None], lv[None])[0] >= 0

    def test_zero_only_at_prior(self):
        assert kl_divergence(np.array([[1e-3, 0.0]]), np.zeros((1, 2)))[0] > 0
        assert kl_divergence(np.zeros((1, 2)), np.array([[0.0, 1e-3]]))[0] > 0


class TestReconstructionLoss:
    def test_fair_coin(self):
        p = np.full((1, 3, 4, 4), 0.5)
        assert reconstruction_loss(p, p)[0] == pytest.approx(48 * math.log(2), rel=1e-12)

    def test_certain_target(self):
        t = np.ones((1, 1, 2, 2))
        assert reconstruction_loss(np.ones_like(t), t)[0] < 1e-6

    def test_hand_computed(self):
        p = np.array([0.2, 0.7, 0.5, 0.9]).reshape(1, 1, 2, 2)
        t = np.array([0.0, 1.0, 0.3, 0.6]).reshape(1, 1, 2, 2)
        expected = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
                        for pi, ti in zip(p.ravel(), t.ravel()))
        assert reconstruction_loss(p, t)[0] == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_loss(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


class TestEncodeDecode:
    def test_latent_extents(self):
        model = warmed(VPE(VpeConfig(input_size=48, encoder=((8, 7), (8, 4), (8, 4))), seed=0))
        lat = model.encode(np.zeros((2, 3, 48, 48), np.float32))
        assert lat.mean.shape == (2, 300) and lat.log_variance.shape == (2, 300)

    def test_identical_inputs_identical_latents(self, toy):
        warmed(toy)
        x = np.random.default_rng(3).random((1, 3, 16, 16))
        lat = toy.encode(np.concatenate([x, x]))
        assert np.array_equal(lat.mean[0], lat.mean[1])

    def test_fresh_model_finite(self):
        model = VPE(VpeConfig.toy(), seed=5)
        lat = model.encode(np.random.default_rng(0).random((4, 3, 16, 16)), train=True)
        assert np.isfinite(lat.mean).all() and np.isfinite(lat.log_variance).all()

    def test_wrong_size_rejected(self, toy):
        with pytest.raises(ValueError, match="letterbox"):
            toy.encode(np.zeros((1, 3, 20, 20)))

    def test_decode_range_shape_determinism(self, toy):
        warmed(toy)
        z = np.random.default_rng(0).standard_normal((3, 300)) * 20
        a, b = toy.decode(z), toy.decode(z)
        assert a.shape == (3, 3, 16, 16)
        assert np.all(a > 0) and np.all(a < 1)
        assert np.array_equal(a, b)

    def test_embed_is_encoder_mean(self, toy):
        warmed(toy)
        x = np.random.default_rng(1).random((5, 3, 16, 16)).astype(np.float32)
        assert np.array_equal(toy.embed(x), toy.encode(x).mean)
        assert toy.embed(x).shape == (5, 300)


class TestLoss:
    def test_decoupled_terms(self):
        """kl_weight 0 and a decoder frozen at 0.5 give P ln 2 for any input."""
        model = VPE(VpeConfig.toy(kl_weight=0.0), seed=0, dtype=np.float64)
        last = model.batchnorms()[-1]   # zero the final normalized map: logits are 0
        last.gamma.value[:] = 0.0
        last.beta.value[:] = 0.0
        rng = np.random.default_rng(0)
        x, t = rng.random((2, 2, 3, 16, 16))
        parts = model.loss_and_grad(x, t, rng=rng)
        assert parts.loss == pytest.approx(16 * 16 * 3 * math.log(2), rel=1e-12)

    def test_finite_positive_at_init(self):
        model = VPE(VpeConfig.toy(), seed=1)
        rng = np.random.default_rng(0)
        x, t = rng.random((2, 4, 3, 16, 16))
        parts = model.loss_and_grad(x, t, rng=rng)
        assert np.isfinite(parts.loss) and parts.loss > 0
        assert parts.loss >= parts.kl >= 0

    def test_self_mode_swaps_only_target(self):
        rng = np.random.default_rng(0)
        x, t = rng.random((2, 4, 3, 16, 16))
        eps = rng.standard_normal((1, 4, 300))
        vae = VPE(VpeConfig.toy(target_mode="self"), seed=0)
        vpe = VPE(VpeConfig.toy(), seed=0)
        a = vae.loss_and_grad(x, t, eps=eps)
        b = vpe.loss_and_grad(x, x, eps=eps)
        assert a.loss == b.loss
        assert np.array_equal(a.extras["target"], x.astype(np.float32))

    def test_end_to_end_gradient_check(self):
        report = loss_gradient_check(VpeConfig.toy(), seed=0, batch=2, max_coords=6)
        assert report.max_error < 1e-4, str(report)


class TestStateDict:
    def test_round_trip_reproduces_embeddings(self, toy):
        warmed(toy)
        other = VPE(VpeConfig.toy(), seed=9)
        other.load_state_dict(toy.state_dict())
        x = np.random.default_rng(2).random((3, 3, 16, 16))
        assert np.array_equal(other.embed(x), toy.embed(x))

    def test_shape_mismatch_rejected(self, toy):
        small = VPE(VpeConfig.toy(latent_dim=10), seed=0)
        with pytest.raises(ValueError):
            small.load_state_dict(toy.state_dict())
