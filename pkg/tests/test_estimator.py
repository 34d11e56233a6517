"""Bias-displacement entropy estimator and drift-envelope tests."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import (
    ClientDataset,
    ConfusionAverages,
    EnvelopeParams,
    EstimatorConfig,
    MlpModel,
    batch_gradient,
    confusion_averages,
    entropy_gap_lower_bound,
    envelope_coverage,
    envelope_value,
    estimate_entropy,
    expected_bias_update,
    fit_envelope,
    forward,
    gradient_gap_points,
    softmax,
)
from fedsim.errors import ConfigError, DomainError

from conftest import random_dataset


class TestEstimateEntropy:
    def test_frozen_single_spike(self):
        # delta_bias = (0.01, 0 x 9) at T = 0.0025 puts logits (4, 0 x 9)
        # through the softmax: (0.858486, 0.015724 x 9), entropy 0.718639
        db = np.zeros(10)
        db[0] = 0.01
        cfg = EstimatorConfig(temperature=0.0025)
        probs = softmax(db[None, :] / cfg.temperature)[0]
        assert probs[0] == pytest.approx(0.858486, abs=1e-6)
        assert probs[1] == pytest.approx(0.015724, abs=1e-6)
        assert estimate_entropy(db, cfg) == pytest.approx(0.718639, abs=1e-6)

    def test_zero_vector_gives_log_c(self):
        cfg = EstimatorConfig()
        assert estimate_entropy(np.zeros(10), cfg) == pytest.approx(np.log(10), abs=1e-12)

    def test_strong_spike_near_zero(self):
        db = np.zeros(4)
        db[2] = 1.0
        assert estimate_entropy(db, EstimatorConfig(0.0025)) < 1e-6

    @given(
        st.lists(st.floats(-0.02, 0.02), min_size=2, max_size=12),
        st.floats(-5.0, 5.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_shift_invariance(self, db, shift):
        cfg = EstimatorConfig(temperature=0.0025)
        base = estimate_entropy(np.array(db), cfg)
        shifted = estimate_entropy(np.array(db) + shift, cfg)
        assert shifted == pytest.approx(base, abs=1e-9)

    @given(st.lists(st.floats(-0.05, 0.05), min_size=2, max_size=12))
    @settings(max_examples=80, deadline=None)
    def test_bounds(self, db):
        h = estimate_entropy(np.array(db), EstimatorConfig(0.0025))
        assert -1e-12 <= h <= np.log(len(db)) + 1e-12

    def test_validation(self):
        with pytest.raises(ConfigError):
            estimate_entropy(np.zeros(10), EstimatorConfig(temperature=0.0))
        with pytest.raises(ConfigError):
            estimate_entropy(np.zeros(1), EstimatorConfig())
        with pytest.raises(ConfigError):
            estimate_entropy(np.zeros((2, 2)), EstimatorConfig())


def brute_force_confusion(model: MlpModel, ds: ClientDataset):
    probs = softmax(forward(model, ds.features))
    e = np.zeros(model.num_classes)
    for i in range(model.num_classes):
        vals = [probs[s, i] for s in range(ds.num_samples) if ds.labels[s] != i]
        e[i] = np.mean(vals)
    return e


class TestConfusionAverages:
    def test_matches_brute_force(self, rng):
        ds = random_dataset(rng, n=40, dim=6, num_classes=3)
        model = MlpModel.init((6, 3), seed=5)
        conf = confusion_averages(model, ds)
        expected = brute_force_confusion(model, ds)
        np.testing.assert_allclose(conf.e, expected, atol=1e-12)
        assert conf.delta_spread == pytest.approx(
            np.max(np.abs(expected.mean() - expected)), abs=1e-12
        )

    def test_uniform_model_is_exact(self, rng):
        ds = random_dataset(rng, n=30, dim=4, num_classes=5)
        model = MlpModel.init((4, 5), seed=0)
        model.theta[:] = 0.0
        conf = confusion_averages(model, ds)
        np.testing.assert_allclose(conf.e, np.full(5, 0.2), atol=1e-14)
        assert conf.delta_spread == pytest.approx(0.0, abs=1e-14)

    def test_single_label_dataset_rejected(self):
        ds = ClientDataset(np.zeros((4, 3)), np.full(4, 1, dtype=int), 3)
        model = MlpModel.init((3, 3), seed=0)
        with pytest.raises(DomainError):
            confusion_averages(model, ds)

    def test_empty_rejected(self):
        ds = ClientDataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 3)
        model = MlpModel.init((3, 3), seed=0)
        with pytest.raises(DomainError):
            confusion_averages(model, ds)


class TestExpectedBiasUpdate:
    def test_frozen_two_class(self):
        conf = ConfusionAverages(e=np.array([0.3, 0.2]), delta_spread=0.05)
        out = expected_bias_update(np.array([1.0, 0.0]), conf, lr=0.1, epochs=1)
        np.testing.assert_allclose(out, [0.02, -0.02], atol=1e-15)

    def test_epochs_scale_linearly(self):
        conf = ConfusionAverages(e=np.array([0.1, 0.4, 0.2]), delta_spread=0.0)
        one = expected_bias_update(np.array([0.5, 0.25, 0.25]), conf, 0.05, 1)
        three = expected_bias_update(np.array([0.5, 0.25, 0.25]), conf, 0.05, 3)
        np.testing.assert_allclose(three, 3 * one, atol=1e-15)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_zero_for_any_distribution(self, raw):
        dist = np.array(raw) / np.sum(raw)
        e = np.linspace(0.05, 0.2, dist.size)
        conf = ConfusionAverages(e=e, delta_spread=float(np.max(np.abs(e.mean() - e))))
        out = expected_bias_update(dist, conf, lr=0.1, epochs=2)
        assert abs(out.sum()) < 1e-12

    def test_shape_mismatch(self):
        conf = ConfusionAverages(e=np.array([0.3, 0.2]), delta_spread=0.0)
        with pytest.raises(ConfigError):
            expected_bias_update(np.array([1.0, 0.0, 0.0]), conf, 0.1, 1)


class TestEntropyGapLowerBound:
    def frozen_conf(self):
        # off-label averages summing to exactly 1 with zero spread
        return ConfusionAverages(e=np.full(10, 0.1), delta_spread=0.0)

    def test_frozen_one_hot_case(self):
        # balanced reference vs one-hot client, C=10, lr*epochs=0.1,
        # T=0.0025: 0.5 * (0.1 * 1 / 0.025)^2 * 0.9 = 7.2 and both
        # correction terms vanish
        dist_u = np.full(10, 0.1)
        dist_k = np.zeros(10)
        dist_k[0] = 1.0
        bound = entropy_gap_lower_bound(
            dist_u, dist_k, self.frozen_conf(), lr=0.1, epochs=1, temperature=0.0025
        )
        assert bound == pytest.approx(7.2, abs=1e-9)

    def test_reference_drift_lowers_bound(self):
        dist_k = np.zeros(10)
        dist_k[0] = 1.0
        off = np.full(10, 0.1)
        off[0] += 0.02
        off[1] -= 0.02
        base = entropy_gap_lower_bound(
            np.full(10, 0.1), dist_k, self.frozen_conf(), 0.1, 1, 0.0025
        )
        drifted = entropy_gap_lower_bound(
            off, dist_k, self.frozen_conf(), 0.1, 1, 0.0025
        )
        assert drifted < base

    def test_spread_penalty_lowers_bound(self):
        dist_u = np.full(10, 0.1)
        dist_k = np.zeros(10)
        dist_k[0] = 1.0
        noisy = ConfusionAverages(e=np.full(10, 0.1), delta_spread=0.01)
        base = entropy_gap_lower_bound(dist_u, dist_k, self.frozen_conf(), 0.1, 1, 0.0025)
        penal = entropy_gap_lower_bound(dist_u, dist_k, noisy, 0.1, 1, 0.0025)
        assert penal < base

    def test_uniform_client_gives_nonpositive_bound(self):
        dist = np.full(10, 0.1)
        bound = entropy_gap_lower_bound(dist, dist, self.frozen_conf(), 0.1, 1, 0.0025)
        assert bound <= 0.0

    def test_validation(self):
        conf = self.frozen_conf()
        with pytest.raises(ConfigError):
            entropy_gap_lower_bound(np.full(9, 1 / 9), np.full(10, 0.1), conf, 0.1, 1, 0.0025)
        with pytest.raises(ConfigError):
            entropy_gap_lower_bound(
                np.full(10, 0.1), np.full(10, 0.1), conf, 0.1, 1, 0.0
            )


class TestGradientGapPoints:
    def test_pooled_client_has_zero_gap(self, rng):
        pooled = random_dataset(rng, n=30, dim=5, num_classes=3)
        model = MlpModel.init((5, 8, 3), seed=2)
        points = gradient_gap_points([pooled], pooled, model, lr=0.1)
        ent, gap = points[0]
        assert gap == 0.0
        assert ent == pytest.approx(
            -np.sum(
                np.bincount(pooled.labels, minlength=3)
                / 30
                * np.log(np.bincount(pooled.labels, minlength=3) / 30)
            ),
            abs=1e-12,
        )

    def test_matches_direct_gradient_difference(self, rng):
        pooled = random_dataset(rng, n=24, dim=4, num_classes=3)
        client = pooled.subset(np.arange(8))
        model = MlpModel.init((4, 3), seed=7)
        lr = 0.05
        (ent, gap), = gradient_gap_points([client], pooled, model, lr=lr)
        _, g_pool = batch_gradient(model, pooled.features, pooled.labels)
        _, g_cli = batch_gradient(model, client.features, client.labels)
        assert gap == pytest.approx(np.sum((lr * (g_cli - g_pool)) ** 2), rel=1e-12)

    def test_empty_client_rejected(self, rng):
        pooled = random_dataset(rng, n=10, dim=3, num_classes=2)
        empty = ClientDataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 2)
        model = MlpModel.init((3, 2), seed=0)
        with pytest.raises(DomainError):
            gradient_gap_points([empty], pooled, model, lr=0.1)


class TestEnvelope:
    def test_value_at_log_c(self):
        params = EnvelopeParams(beta=1.5, rho=0.4, kappa=1.0)
        # at x = ln C the exponential equals 1, so height is kappa - rho
        v = envelope_value(np.array([np.log(10)]), params, 10)
        assert v[0] == pytest.approx(0.6, abs=1e-12)

    def test_coverage_counts_points_under_curve(self):
        params = EnvelopeParams(beta=1.0, rho=0.5, kappa=2.0)
        xs = np.array([0.0, 0.5, 1.0, 2.0])
        heights = envelope_value(xs, params, 10)
        points = [
            (xs[0], heights[0] - 0.1),
            (xs[1], heights[1]),
            (xs[2], heights[2] + 0.1),
            (xs[3], heights[3] - 0.2),
        ]
        assert envelope_coverage(points, params, 10) == pytest.approx(0.75)

    def test_fit_reaches_target_coverage(self, rng):
        true = EnvelopeParams(beta=1.5, rho=1.0, kappa=3.0)
        xs = rng.uniform(0.0, np.log(10), size=200)
        ys = envelope_value(xs, true, 10) - rng.uniform(0.0, 0.5, size=200)
        points = list(zip(xs.tolist(), ys.tolist()))
        fitted = fit_envelope(points, num_classes=10, coverage_target=0.9)
        fitted.validate()
        assert envelope_coverage(points, fitted, 10) >= 0.9

    def test_fit_is_deterministic(self, rng):
        xs = rng.uniform(0.0, np.log(4), size=50)
        ys = rng.uniform(0.5, 2.0, size=50)
        points = list(zip(xs.tolist(), ys.tolist()))
        assert fit_envelope(points, 4) == fit_envelope(points, 4)

    def test_full_coverage_target(self, rng):
        xs = rng.uniform(0.0, np.log(10), size=40)
        ys = 5.0 + rng.uniform(0.0, 1.0, size=40)
        points = list(zip(xs.tolist(), ys.tolist()))
        fitted = fit_envelope(points, 10, coverage_target=1.0)
        assert envelope_coverage(points, fitted, 10) == 1.0

    def test_params_validation(self):
        with pytest.raises(ConfigError):
            EnvelopeParams(beta=0.0, rho=0.5, kappa=1.0).validate()
        with pytest.raises(ConfigError):
            EnvelopeParams(beta=1.0, rho=0.5, kappa=0.4).validate()
        with pytest.raises(ConfigError):
            fit_envelope([(0.1, 0.2)], 10, coverage_target=0.0)
        with pytest.raises(DomainError):
            fit_envelope([], 10)
        with pytest.raises(DomainError):
            envelope_coverage([], EnvelopeParams(1.0, 0.5, 1.0), 10)
