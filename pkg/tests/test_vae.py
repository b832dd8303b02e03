"""Spectral-compression VAE: posteriors, losses, adversary, training loop."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hsidiff.errors import ArgumentError, NumericDomainError, TrainingDivergedError
from hsidiff.nnutil import flat_parameters
from hsidiff.vae import (
    LatentPosterior,
    PatchDiscriminator,
    Vae,
    VaeConfig,
    VaeTrainResult,
    discriminator_loss,
    encode_mean,
    kl_divergence,
    reparameterize,
    train_vae,
    vae_loss,
)


def small_config(**kw) -> VaeConfig:
    base = dict(in_channels=6, hidden=8, depth=2, lambda_kl=1e-4, lambda_adv=0.1,
                lr=1e-3, epochs=2, batch_size=4, seed=0)
    base.update(kw)
    return VaeConfig(**base)


def random_patches(n=8, c=6, s=5, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, c, s, s)).astype(np.float32)


class TestConfig:
    def test_bounds(self):
        small_config()
        with pytest.raises(ArgumentError):
            small_config(in_channels=3)
        with pytest.raises(ArgumentError):
            small_config(depth=0)
        with pytest.raises(ArgumentError):
            small_config(lambda_kl=-1.0)
        with pytest.raises(ArgumentError):
            small_config(lr=0.0)
        with pytest.raises(ArgumentError):
            small_config(epochs=0)


class TestEncodeDecode:
    def test_posterior_shape_preserves_spatial_size(self):
        vae = Vae(small_config())
        for s in (3, 5, 7, 9):
            post = vae.encode(torch.rand(2, 6, s, s, generator=torch.Generator().manual_seed(s)))
            assert post.mu.shape == (2, 4, s, s)
            assert post.logvar.shape == (2, 4, s, s)

    def test_seeded_weights_are_reproducible(self):
        a = Vae(small_config())
        b = Vae(small_config())
        c = Vae(small_config(seed=1))
        assert torch.equal(flat_parameters(a), flat_parameters(b))
        assert not torch.equal(flat_parameters(a), flat_parameters(c))

    def test_logvar_is_clamped(self):
        vae = Vae(small_config())
        with torch.no_grad():
            vae.logvar_head.bias.fill_(100.0)
            post = vae.encode(torch.rand(1, 6, 5, 5))
        assert post.logvar.max() <= 10.0
        with torch.no_grad():
            vae.logvar_head.bias.fill_(-100.0)
            post = vae.encode(torch.rand(1, 6, 5, 5))
        assert post.logvar.min() >= -10.0

    def test_decode_range_and_shape(self):
        vae = Vae(small_config())
        with torch.no_grad():
            out = vae.decode(torch.randn(3, 4, 5, 5, generator=torch.Generator().manual_seed(0)))
        assert out.shape == (3, 6, 5, 5)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_encode_is_pure(self):
        vae = Vae(small_config())
        x = torch.rand(2, 6, 5, 5, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            a = vae.encode(x)
            b = vae.encode(x)
        assert torch.equal(a.mu, b.mu)
        assert torch.equal(a.logvar, b.logvar)

    def test_encode_mean_matches_posterior_and_batching(self):
        vae = Vae(small_config())
        patches = random_patches(n=10)
        full = encode_mean(vae, patches)
        small = encode_mean(vae, patches, batch_size=3)
        # Conv reductions reorder across batch sizes; equality is approximate.
        assert np.allclose(full, small, atol=1e-6)
        with torch.no_grad():
            direct = vae.encode(torch.as_tensor(patches)).mu.numpy()
        assert np.array_equal(full, direct)


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        mu = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(2))
        post = LatentPosterior(mu=mu, logvar=torch.zeros_like(mu))
        assert torch.equal(reparameterize(post, torch.zeros_like(mu)), mu)

    def test_unit_logvar_displaces_by_eps(self):
        mu = torch.zeros(1, 4, 2, 2)
        post = LatentPosterior(mu=mu, logvar=torch.zeros_like(mu))
        out = reparameterize(post, torch.ones_like(mu))
        assert torch.equal(out, torch.ones_like(mu))

    def test_monte_carlo_std_matches_logvar(self):
        n = 100_000
        mu = torch.zeros(n)
        post = LatentPosterior(mu=mu, logvar=torch.full((n,), math.log(4.0)))
        eps = torch.as_tensor(np.random.default_rng(0).standard_normal(n), dtype=torch.float32)
        draw = reparameterize(post, eps)
        assert float(draw.std()) == pytest.approx(2.0, abs=0.015)

    def test_shape_mismatch_rejected(self):
        post = LatentPosterior(mu=torch.zeros(2, 4), logvar=torch.zeros(2, 4))
        with pytest.raises(ArgumentError):
            reparameterize(post, torch.zeros(2, 3))
        with pytest.raises(ArgumentError):
            LatentPosterior(mu=torch.zeros(2, 4), logvar=torch.zeros(2, 5))


class TestKlDivergence:
    def test_standard_normal_has_zero_kl(self):
        post = LatentPosterior(mu=torch.zeros(2, 4, 3, 3), logvar=torch.zeros(2, 4, 3, 3))
        assert float(kl_divergence(post)) == 0.0

    def test_unit_mean_shift(self):
        post = LatentPosterior(mu=torch.ones(5), logvar=torch.zeros(5))
        assert float(kl_divergence(post)) == 0.5

    def test_worked_variance_example(self):
        post = LatentPosterior(
            mu=torch.zeros(1, dtype=torch.float64),
            logvar=torch.full((1,), math.log(4.0), dtype=torch.float64),
        )
        assert float(kl_divergence(post)) == pytest.approx(0.8068528194400547, abs=1e-12)
        assert float(kl_divergence(post)) == pytest.approx(0.806853, abs=1e-6)

    @given(
        st.floats(min_value=-5.0, max_value=5.0),
        st.floats(min_value=-6.0, max_value=6.0),
    )
    def test_nonnegative(self, mu, logvar):
        post = LatentPosterior(
            mu=torch.full((3,), mu, dtype=torch.float64),
            logvar=torch.full((3,), logvar, dtype=torch.float64),
        )
        assert float(kl_divergence(post)) >= -1e-15


class TestVaeLoss:
    def zero_post(self, shape):
        return LatentPosterior(mu=torch.zeros(shape), logvar=torch.zeros(shape))

    def test_perfect_reconstruction_is_zero(self):
        patch = torch.rand(2, 6, 5, 5, generator=torch.Generator().manual_seed(3))
        loss = vae_loss(patch, patch.clone(), self.zero_post((2, 4, 5, 5)), None, 1e-4, 0.0)
        assert float(loss) == 0.0

    def test_constant_offset_example(self):
        patch = torch.zeros(1, 6, 5, 5)
        recon = torch.full_like(patch, 0.1)
        loss = vae_loss(patch, recon, self.zero_post((1, 4, 5, 5)), None, 1e-4, 0.0)
        assert float(loss) == pytest.approx(0.01, abs=1e-6)

    def test_adversarial_term(self):
        patch = torch.rand(2, 6, 5, 5, generator=torch.Generator().manual_seed(4))
        loss = vae_loss(
            patch, patch.clone(), self.zero_post((2, 4, 5, 5)),
            torch.full((2,), 0.5), 0.0, 1.0,
        )
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-6)

    def test_missing_score_rejected(self):
        patch = torch.zeros(1, 6, 5, 5)
        with pytest.raises(ArgumentError):
            vae_loss(patch, patch, self.zero_post((1, 4, 5, 5)), None, 1e-4, 0.1)

    def test_gradients_match_finite_differences(self):
        config = small_config(hidden=4, depth=2, lambda_adv=0.0)
        vae = Vae(config, dtype=torch.float64)
        gen = torch.Generator().manual_seed(5)
        patch = torch.rand(2, 6, 3, 3, generator=gen, dtype=torch.float64)
        eps = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)

        def compute() -> torch.Tensor:
            recon, post = vae(patch, eps)
            return vae_loss(patch, recon, post, None, config.lambda_kl, 0.0)

        loss = compute()
        loss.backward()
        rng = np.random.default_rng(0)
        params = [p for p in vae.parameters() if p.grad is not None]
        for _ in range(5):
            p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape)
            analytic = float(p.grad[idx])
            h = 1e-6
            with torch.no_grad():
                p[idx] += h
                plus = float(compute())
                p[idx] -= 2 * h
                minus = float(compute())
                p[idx] += h
            numeric = (plus - minus) / (2 * h)
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-8)


class TestDiscriminator:
    def test_scores_in_unit_interval(self):
        disc = PatchDiscriminator(6, 8, seed=0)
        with torch.no_grad():
            scores = disc(torch.rand(5, 6, 5, 5, generator=torch.Generator().manual_seed(6)))
        assert scores.shape == (5,)
        assert scores.min() > 0.0 and scores.max() < 1.0

    def test_uninformative_scores_give_two_log_two(self):
        loss = discriminator_loss(torch.full((3,), 0.5), torch.full((3,), 0.5))
        assert float(loss) == pytest.approx(1.3862943611198906, abs=1e-6)

    def test_perfect_scores_give_near_zero(self):
        loss = discriminator_loss(torch.ones(3), torch.zeros(3))
        assert float(loss) == pytest.approx(0.0, abs=1e-5)

    def test_label_swap_symmetry(self):
        r = torch.tensor([0.25, 0.75, 0.5])
        f = torch.tensor([0.5, 0.25, 0.75])
        a = discriminator_loss(r, f)
        b = discriminator_loss(1.0 - f, 1.0 - r)
        assert float(a) == pytest.approx(float(b), abs=1e-7)

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(NumericDomainError):
            discriminator_loss(torch.tensor([1.2]), torch.tensor([0.5]))
        with pytest.raises(NumericDomainError):
            discriminator_loss(torch.tensor([0.5]), torch.tensor([-0.1]))


class TestTraining:
    def test_deterministic_in_seed(self):
        patches = random_patches()
        a = train_vae(patches, small_config())
        b = train_vae(patches, small_config())
        assert a.history == b.history
        assert torch.equal(flat_parameters(a.vae), flat_parameters(b.vae))
        assert torch.equal(flat_parameters(a.discriminator), flat_parameters(b.discriminator))

    def test_history_schema(self):
        result = train_vae(random_patches(), small_config())
        assert len(result.history) == 2
        assert set(result.history[0]) == {"epoch", "recon_mse", "kl", "disc"}
        assert result.history[0]["epoch"] == 1.0

    def test_adversary_disabled_skips_disc_loss(self):
        result = train_vae(random_patches(), small_config(lambda_adv=0.0))
        assert all(row["disc"] == 0.0 for row in result.history)

    def test_input_validation(self):
        with pytest.raises(ArgumentError):
            train_vae(np.zeros((0, 6, 5, 5), dtype=np.float32), small_config())
        with pytest.raises(ArgumentError):
            train_vae(np.zeros((4, 5, 5, 5), dtype=np.float32), small_config())

    def test_non_finite_loss_raises_divergence(self):
        patches = random_patches()
        patches[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            train_vae(patches, small_config(lambda_adv=0.0))

    def test_single_patch_overfit(self):
        patches = random_patches(n=1, c=6, s=5, seed=7)
        config = small_config(lambda_adv=0.0, lambda_kl=0.0, lr=3e-3, epochs=200, batch_size=1)
        result = train_vae(patches, config)
        first = result.history[0]["recon_mse"]
        last = result.history[-1]["recon_mse"]
        assert last < 0.1 * first
