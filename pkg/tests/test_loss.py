#!/usr/bin/env python3
"""
Tests for the heads, the loss terms and the adversarial objective.
"""

import math

import numpy as np
import pytest

from hcan import tensor as T
from hcan.dataio import Conversation
from hcan.errors import ConfigError, DimensionError, TrainingDataError
from hcan.loss import (
    HeadParams,
    LossComponents,
    LossConfig,
    adversarial_loss,
    cross_entropy,
    fgv_perturbation,
    heads_forward,
    kl_loss,
    objective,
    total_loss,
)
from hcan.model import HcanModel


def tiny_model(seed=0, **kwargs):
    return HcanModel(2, 3, ece_heads=2, ia_heads=2, dropout=0.0, seed=seed, dtype=np.float64, **kwargs)


def tiny_conversation(seed=0, n=4):
    rng = np.random.default_rng(seed)
    return Conversation.create(f"c{seed}", rng.integers(0, 2, size=n), rng.standard_normal((n, 2)),
                               rng.integers(0, 3, size=n))


class TestHeads:

    @pytest.fixture
    def heads(self):
        return HeadParams.initialize(2, 3, np.random.default_rng(0))

    def test_classifier_starts_at_identity(self, heads):
        assert np.array_equal(heads.w_o.data, np.eye(3))
        assert np.all(heads.b_o.data == 0.0)

    def test_distributions(self, heads):
        rng = np.random.default_rng(1)
        v_hat, g = T.constant(rng.standard_normal((5, 8))), T.constant(rng.standard_normal((5, 4)))
        dists = heads_forward(v_hat, g, heads)
        for d in (dists.d_src, dists.d_tmp, dists.y_hat):
            assert d.shape == (5, 3)
            np.testing.assert_allclose(d.data.sum(axis=1), 1.0, atol=1e-12)

    def test_predicted_distribution_ignores_current_state(self, heads):
        rng = np.random.default_rng(2)
        v_hat = T.constant(rng.standard_normal((5, 8)))
        a = heads_forward(v_hat, T.constant(rng.standard_normal((5, 4))), heads)
        b = heads_forward(v_hat, T.constant(rng.standard_normal((5, 4))), heads)
        assert np.array_equal(a.d_tmp.data, b.d_tmp.data)
        assert not np.allclose(a.d_src.data, b.d_src.data)

    def test_one_projection_feeds_both_distributions(self, heads):
        rng = np.random.default_rng(3)
        v_hat, g = T.constant(rng.standard_normal((5, 8))), T.constant(rng.standard_normal((5, 4)))
        before = heads_forward(v_hat, g, heads)
        heads.w_d.data[:, 0] += 1.0
        after = heads_forward(v_hat, g, heads)
        assert not np.allclose(before.d_src.data, after.d_src.data)
        assert not np.allclose(before.d_tmp.data, after.d_tmp.data)
        assert [name for name, _ in heads.named_parameters()].count("heads.w_d") == 1

    def test_width_checked(self, heads):
        with pytest.raises(DimensionError):
            heads_forward(T.constant(np.ones((2, 4))), T.constant(np.ones((2, 4))), heads)


class TestLossTerms:

    def test_kl_of_identical_distributions_is_zero(self):
        p = T.constant(np.log(np.random.default_rng(0).dirichlet(np.ones(4), size=3)))
        assert kl_loss(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_closed_form(self):
        t = T.constant(np.log([[0.5, 0.5]]))
        s = T.constant(np.log([[0.25, 0.75]]))
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_loss(t, s).item() == pytest.approx(expected, abs=1e-12)
        assert kl_loss(t, s).item() == pytest.approx(0.14384, abs=1e-5)

    def test_kl_is_averaged_over_utterances(self):
        t = T.constant(np.log([[0.5, 0.5], [0.5, 0.5]]))
        s = T.constant(np.log([[0.25, 0.75], [0.5, 0.5]]))
        assert kl_loss(t, s).item() == pytest.approx(0.14384 / 2, abs=1e-5)

    def test_kl_matches_term_by_term_sum(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p = rng.dirichlet(np.ones(5), size=4)
            q = rng.dirichlet(np.ones(5), size=4)
            expected = 0.0
            for i in range(4):
                for k in range(5):
                    expected += p[i, k] * math.log(p[i, k] / q[i, k])
            value = kl_loss(T.constant(np.log(p)), T.constant(np.log(q))).item()
            assert value == pytest.approx(expected / 4, abs=1e-12)
            assert value >= 0.0

    def test_uniform_prediction_cross_entropy(self):
        log_y_hat = T.constant(np.full((3, 4), math.log(0.25)))
        assert cross_entropy(log_y_hat, [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-9)

    def test_one_hot_prediction_has_zero_cross_entropy(self):
        log_y_hat = T.constant(np.where(np.eye(3) == 1.0, 0.0, -50.0))
        assert cross_entropy(log_y_hat, [0, 1, 2]).item() == 0.0

    def test_cross_entropy_normalizes_by_total_utterances(self):
        a = T.constant(np.full((1, 2), math.log(0.5)))
        b = T.constant(np.where(np.eye(2)[[0, 1, 0]] == 1.0, 0.0, -50.0))
        assert cross_entropy([a, b], [[0], [0, 1, 0]]).item() == pytest.approx(math.log(2) / 4)

    def test_cross_entropy_needs_labels(self):
        log_y_hat = T.constant(np.log(np.full((2, 2), 0.5)))
        with pytest.raises(TrainingDataError, match="labels required"):
            cross_entropy(log_y_hat, None)
        with pytest.raises(TrainingDataError):
            cross_entropy(log_y_hat, [0, 2])
        with pytest.raises(DimensionError):
            cross_entropy(log_y_hat, [0])

    def test_saturated_heads_give_finite_losses(self):
        heads = HeadParams.initialize(1, 3, np.random.default_rng(0), dtype=np.float32)
        heads.w_d.data[:] = np.array([[3.0, -3.0, 0.0], [3.0, -3.0, 0.0]], dtype=np.float32)
        heads.lambda_theta.data[:] = 0.0
        g = T.constant(np.full((2, 2), 5.0), dtype=np.float32)
        g.data[0] = 50.0
        dists = heads_forward(T.constant(np.ones((2, 4)), dtype=np.float32), g, heads)
        assert dists.d_src.data[0, 1] == 0.0
        assert np.all(np.isfinite(dists.log_d_src.data))
        kl = kl_loss(dists.log_d_tmp, dists.log_d_src).item()
        ce = cross_entropy(dists.log_y_hat, [1, 1]).item()
        assert np.isfinite(kl) and kl > 0.0
        assert np.isfinite(ce)

    def test_saturated_row_keeps_a_finite_gradient(self):
        logits = T.parameter([[0.0, 200.0, -200.0]], dtype=np.float32)
        with T.Tape():
            loss = cross_entropy(T.log_softmax(logits), [2])
            (grad,) = T.gradients(loss, [logits])
        assert np.isfinite(loss.item()) and loss.item() == pytest.approx(400.0)
        np.testing.assert_allclose(grad, [[0.0, 1.0, -1.0]], atol=1e-6)

    def test_total_loss_arithmetic(self):
        assert total_loss((1.0, 0.5, 2.0), LossConfig(alpha=0.2, beta=0.05)) == 1.2

    def test_total_loss_skips_ablated_terms(self):
        assert total_loss(LossComponents(cross=1.0, adv=2.0), LossConfig(ablate_kl=True)) == pytest.approx(1.1)
        assert total_loss(LossComponents(cross=1.0, kl=0.5), LossConfig(ablate_adv=True)) == pytest.approx(1.1)
        assert total_loss(LossComponents(cross=1.0), LossConfig(ablate_eae=True, ablate_adv=True)) == 1.0

    def test_total_loss_requires_enabled_terms(self):
        with pytest.raises(ConfigError):
            total_loss(LossComponents(cross=1.0, adv=2.0), LossConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(alpha=-1.0).validate()
        with pytest.raises(ConfigError):
            LossConfig(fgv_norm="row").validate()
        LossConfig(epsilon=0.0).validate()


class TestPerturbation:

    def test_global_norm_equals_epsilon(self):
        grad = np.random.default_rng(0).standard_normal((5, 3))
        noise = fgv_perturbation(grad, 0.1)
        assert np.linalg.norm(noise) == pytest.approx(0.1, abs=1e-9)
        np.testing.assert_allclose(noise / np.linalg.norm(noise), grad / np.linalg.norm(grad))

    def test_per_utterance_norm(self):
        grad = np.random.default_rng(1).standard_normal((4, 3))
        grad[2] = 0.0
        noise = fgv_perturbation(grad, 0.3, norm="per_utterance")
        norms = np.linalg.norm(noise, axis=1)
        np.testing.assert_allclose(norms[[0, 1, 3]], 0.3, atol=1e-9)
        assert norms[2] == 0.0

    def test_vanishing_gradient_gives_zero_noise(self):
        assert np.all(fgv_perturbation(np.full((2, 2), 1e-14), 0.1) == 0.0)

    def test_unknown_norm(self):
        with pytest.raises(ConfigError):
            fgv_perturbation(np.ones((2, 2)), 0.1, norm="max")


class TestAdversarialObjective:

    def test_zero_epsilon_doubles_cross_entropy(self):
        model, conv = tiny_model(), tiny_conversation()
        result = adversarial_loss(model, conv, LossConfig(epsilon=0.0))
        assert np.all(result.noise == 0.0)
        assert result.l_adv.item() == 2.0 * result.l_cross.item()

    def test_noise_has_epsilon_norm(self):
        result = adversarial_loss(tiny_model(), tiny_conversation(), LossConfig(epsilon=0.1))
        assert np.linalg.norm(result.noise) == pytest.approx(0.1, abs=1e-9)

    @pytest.mark.slow
    def test_noise_increases_the_loss(self):
        config = LossConfig(epsilon=1e-3)
        ascents = 0
        for trial in range(100):
            result = adversarial_loss(tiny_model(seed=trial), tiny_conversation(seed=1000 + trial), config)
            ascents += result.l_cross_perturbed.item() >= result.l_cross.item()
        assert ascents >= 90

    def test_both_passes_contribute_gradients(self):
        model, conv = tiny_model(), tiny_conversation()
        config = LossConfig(epsilon=0.1)
        params = model.parameters()
        with T.Tape():
            result = adversarial_loss(model, conv, config)
            combined = T.gradients(result.l_adv, params)
            clean = T.gradients(result.l_cross, params)
            perturbed = T.gradients(result.l_cross_perturbed, params)
        for c, a, b in zip(combined, clean, perturbed):
            np.testing.assert_allclose(c, a + b, rtol=1e-12, atol=1e-15)
        assert any(not np.allclose(a, b) for a, b in zip(clean, perturbed))

    def test_fixed_noise_skips_the_gradient_step(self):
        model, conv = tiny_model(), tiny_conversation()
        noise = np.full(conv.features.shape, 0.01)
        result = adversarial_loss(model, conv, LossConfig(), noise=noise)
        assert result.noise is noise

    def test_objective_components(self):
        model, conv = tiny_model(), tiny_conversation()
        config = LossConfig(alpha=0.2, beta=0.05)
        parts = objective(model, conv, config)
        expected = parts.cross.item() + 0.2 * parts.kl.item() + 0.05 * parts.adv.item()
        assert parts.total.item() == pytest.approx(expected, rel=1e-12)

    def test_objective_without_adversarial_term(self):
        parts = objective(tiny_model(), tiny_conversation(), LossConfig(ablate_adv=True))
        assert parts.adv is None and parts.noise is None
        assert parts.total.item() == pytest.approx(parts.cross.item() + 0.2 * parts.kl.item())

    @pytest.mark.parametrize("switch, coefficient", [("ablate_kl", "alpha"), ("ablate_adv", "beta")])
    def test_ablation_switch_equals_zero_coefficient(self, switch, coefficient):
        model, conv = tiny_model(), tiny_conversation()
        params = model.parameters()
        with T.Tape():
            switched = objective(model, conv, LossConfig(**{switch: True}))
            zeroed = objective(model, conv, LossConfig(**{coefficient: 0.0}))
            assert switched.total.item() == zeroed.total.item()
            for a, b in zip(T.gradients(switched.total, params), T.gradients(zeroed.total, params)):
                assert np.array_equal(a, b)

    def test_objective_without_eae_drops_kl(self):
        parts = objective(tiny_model(no_eae=True), tiny_conversation(), LossConfig(ablate_eae=True))
        assert parts.kl is None

    def test_unlabeled_conversation_rejected(self):
        conv = Conversation.create("u", [0, 1], np.zeros((2, 2)))
        with pytest.raises(TrainingDataError, match="labels required"):
            objective(tiny_model(), conv, LossConfig())
        with pytest.raises(TrainingDataError):
            adversarial_loss(tiny_model(), conv, LossConfig())
