"""Masked L1 and adversarial losses: values, gradients, invariants."""

import math

import numpy as np
import pytest

from oracles import masked_l1_direct
from pixelfill.loss import (
    LossConfig,
    discriminator_loss_from_logits,
    generator_adv_loss_from_logits,
    masked_l1,
    masked_l1_grad,
    total_loss,
)


class TestMaskedL1:
    @pytest.mark.parametrize("case", range(8))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng([31, case])
        y = rng.standard_normal((2, 3, 6, 6))
        x = rng.standard_normal((2, 3, 6, 6))
        mask = (rng.random((2, 1, 6, 6)) < 0.4).astype(np.float64)
        if mask.sum() == 0:
            mask[0, 0, 0, 0] = 1.0
        assert masked_l1(y, x, mask) == pytest.approx(
            masked_l1_direct(y, x, mask), rel=1e-12
        )

    def test_out_of_mask_perturbation_invariance(self, rng):
        """Changing pixels outside the mask changes nothing, exactly."""
        y = rng.standard_normal((1, 3, 8, 8))
        x = rng.standard_normal((1, 3, 8, 8))
        mask = np.zeros((1, 1, 8, 8))
        mask[:, :, 2:5, 2:5] = 1.0
        before = masked_l1(y, x, mask)
        y2 = y.copy()
        y2[:, :, 5:, :] += 1000.0
        y2[:, :, :2, :] -= 123.0
        assert masked_l1(y2, x, mask) == before

    def test_normalized_by_masked_count(self):
        y = np.zeros((1, 3, 4, 4))
        x = np.ones((1, 3, 4, 4))
        mask = np.zeros((1, 1, 4, 4))
        mask[0, 0, 0, 0] = 1.0
        # 3 masked elements (one pixel, three channels), |diff| = 1 each
        assert masked_l1(y, x, mask) == pytest.approx(1.0)

    def test_empty_mask_warns_and_returns_zero(self, rng):
        y = rng.standard_normal((1, 3, 4, 4))
        with pytest.warns(UserWarning):
            assert masked_l1(y, y + 1, np.zeros((1, 1, 4, 4))) == 0.0

    def test_mask_rank_variants_agree(self, rng):
        y = rng.standard_normal((2, 3, 5, 5))
        x = rng.standard_normal((2, 3, 5, 5))
        m2 = (rng.random((5, 5)) < 0.5).astype(np.float64)
        full = np.broadcast_to(m2, (2, 5, 5))
        a = masked_l1(y, x, m2)
        b = masked_l1(y, x, full)
        c = masked_l1(y, x, full[:, None])
        assert a == pytest.approx(b) == pytest.approx(c)

    def test_grad_zero_outside_mask(self, rng):
        y = rng.standard_normal((1, 3, 6, 6))
        x = rng.standard_normal((1, 3, 6, 6))
        mask = np.zeros((1, 1, 6, 6))
        mask[:, :, :3, :] = 1.0
        g = masked_l1_grad(y, x, mask)
        assert (g[:, :, 3:, :] == 0).all()
        assert (np.abs(g[:, :, :3, :]) > 0).all()


class TestAdversarialLosses:
    def test_zero_logits_give_log2_terms(self):
        """sigmoid(0) = 1/2, so every term is log 2."""
        z = np.zeros((1, 1, 2, 2))
        d_loss, g_real, g_fake = discriminator_loss_from_logits(z, z)
        assert d_loss == pytest.approx(2.0 * math.log(2.0), rel=1e-12)
        np.testing.assert_allclose(g_real, -0.5 / 4)
        np.testing.assert_allclose(g_fake, 0.5 / 4)
        ns_loss, ns_g = generator_adv_loss_from_logits(z, "non_saturating")
        assert ns_loss == pytest.approx(math.log(2.0), rel=1e-12)
        np.testing.assert_allclose(ns_g, -0.5 / 4)
        mm_loss, mm_g = generator_adv_loss_from_logits(z, "minimax")
        assert mm_loss == pytest.approx(-math.log(2.0), rel=1e-12)
        np.testing.assert_allclose(mm_g, -0.5 / 4)

    def test_confident_discriminator_losses_move_oppositely(self):
        real = np.full((1, 1, 1, 1), 4.0)  # judged real, correctly
        fake = np.full((1, 1, 1, 1), -4.0)  # judged fake, correctly
        good, _, _ = discriminator_loss_from_logits(real, fake)
        bad, _, _ = discriminator_loss_from_logits(fake, real)
        assert good < 0.1 < bad

    def test_extreme_logits_clamped_loss_finite_grad_zero(self):
        huge = np.full((1, 1, 1, 1), 1e4)
        loss, g_real, g_fake = discriminator_loss_from_logits(huge, huge)
        assert math.isfinite(loss)
        assert g_real[0, 0, 0, 0] == 0.0  # p clamped to 1 - eta, grad cut
        loss_g, g = generator_adv_loss_from_logits(-huge, "non_saturating")
        assert math.isfinite(loss_g)
        assert g[0, 0, 0, 0] == 0.0

    def test_non_saturating_grad_strongest_when_fooling_fails(self):
        weak = generator_adv_loss_from_logits(
            np.full((1, 1, 1, 1), -3.0), "non_saturating"
        )[1]
        strong = generator_adv_loss_from_logits(
            np.full((1, 1, 1, 1), 3.0), "non_saturating"
        )[1]
        assert abs(weak[0, 0, 0, 0]) > abs(strong[0, 0, 0, 0])

    def test_minimax_grad_vanishes_when_fooling_fails(self):
        weak = generator_adv_loss_from_logits(
            np.full((1, 1, 1, 1), -6.0), "minimax"
        )[1]
        assert abs(weak[0, 0, 0, 0]) < 0.01

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            generator_adv_loss_from_logits(np.zeros((1, 1, 1, 1)), "wasserstein")


class TestTotalLoss:
    def test_weighted_sum(self):
        cfg = LossConfig(lambda_weight=0.999)
        assert total_loss(2.0, 4.0, cfg) == pytest.approx(0.999 * 2 + 0.001 * 4)

    def test_pure_l1_ignores_adv(self):
        cfg = LossConfig(lambda_weight=1.0)
        assert total_loss(0.5, 123.0, cfg) == pytest.approx(0.5)

    def test_lambda_validated(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_weight=1.5)
        with pytest.raises(ValueError):
            LossConfig(gan_variant="hinge")
