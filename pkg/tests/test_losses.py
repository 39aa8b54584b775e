"""Losses: values against independent oracles, gradients against FD."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aftl.gradcheck import numeric_gradient
from aftl.losses import (classification_loss, consistency_loss, domain_loss,
                         mean_prediction, softmax, softmax_backward)


def scalar_loop_cross_entropy(logits, labels):
    """Straightforward per-sample oracle with python floats."""
    total = 0.0
    for row, label in zip(logits, labels):
        denom = sum(math.exp(v - max(row)) for v in row)
        p = math.exp(row[label] - max(row)) / denom
        total += -math.log(p)
    return total / len(labels)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_extreme_logits_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.isfinite(p).all()
        assert p[0] == pytest.approx(1.0, abs=1e-12)
        assert p[1] == pytest.approx(0.0, abs=1e-12)

    def test_direct_formula(self):
        # e^k / sum(e^m) evaluated with scalar math
        expected = [math.exp(k) / sum(math.exp(m) for m in (1, 2, 3)) for k in (1, 2, 3)]
        assert np.allclose(softmax([1.0, 2.0, 3.0]), expected, atol=1e-15)
        assert np.allclose(softmax([1.0, 2.0, 3.0]),
                           [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    @given(hnp.arrays(np.float64, (4, 6),
                      elements=st.floats(-1e3, 1e3, allow_nan=False)))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, logits):
        p = softmax(logits)
        assert np.all(p >= 0.0)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12


class TestClassificationLoss:
    def test_uniform_logits_ln_k(self):
        logits = np.zeros((4, 10))
        loss, _ = classification_loss(logits, [0, 3, 5, 9])
        assert loss == pytest.approx(math.log(10), abs=1e-9)

    def test_saturated_margin(self):
        logits = np.zeros((2, 10))
        logits[0, 4] = 50.0
        logits[1, 7] = 50.0
        loss, _ = classification_loss(logits, [4, 7])
        assert 0.0 <= loss < 1e-20

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(77)
        logits = rng.normal(size=(3, 5)) * 3.0
        labels = rng.integers(0, 5, size=3)
        loss, _ = classification_loss(logits, labels)
        assert loss == pytest.approx(scalar_loop_cross_entropy(logits, labels), abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(3, 5))
        labels = rng.integers(0, 5, size=3)
        _, grads = classification_loss(logits, labels)
        f = lambda a: classification_loss(a, labels)[0]
        for idx in np.ndindex(logits.shape):
            numeric = numeric_gradient(f, logits, idx)
            assert abs(grads[idx] - numeric) / max(1e-12, abs(numeric)) < 1e-6

    def test_shift_invariance(self):
        # adding any per-row constant to the logits leaves the loss unchanged
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, size=4)
        base, _ = classification_loss(logits, labels)
        row_shifts = rng.normal(size=(4, 1)) * 100.0
        shifted, _ = classification_loss(logits + row_shifts, labels)
        assert shifted == pytest.approx(base, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            classification_loss(np.zeros((0, 3)), [])
        with pytest.raises(ValueError):
            classification_loss(np.zeros((2, 3)), [0, 3])


class TestDomainLoss:
    def test_perfect_discriminator(self):
        batches = []
        for cid in range(3):
            logits = np.zeros((4, 11))
            logits[:, cid] = 50.0
            batches.append((logits, np.full(4, cid)))
        total, per_client, _ = domain_loss(batches)
        assert total < 1e-20
        assert all(t < 1e-20 for t in per_client)

    def test_uniform_logits_ln_n_plus_one(self):
        batches = [(np.zeros((3, 11)), np.full(3, cid)) for cid in range(11)]
        total, per_client, _ = domain_loss(batches)
        for term in per_client:
            assert term == pytest.approx(math.log(11), abs=1e-9)
        assert total == pytest.approx(11 * math.log(11), abs=1e-8)

    def test_reduces_to_per_client_classification(self):
        rng = np.random.default_rng(31)
        batches = [(rng.normal(size=(4, 4)), rng.integers(0, 4, size=4))
                   for _ in range(3)]
        total, per_client, grads = domain_loss(batches)
        direct = [classification_loss(lg, lb) for lg, lb in batches]
        assert total == pytest.approx(sum(l for l, _ in direct), abs=1e-12)
        for (loss, g), term, got in zip(direct, per_client, grads):
            assert term == pytest.approx(loss, abs=1e-12)
            assert np.array_equal(g, got)

    def test_single_client_is_classification_loss(self):
        rng = np.random.default_rng(32)
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        total, per_client, _ = domain_loss([(logits, labels)])
        loss, _ = classification_loss(logits, labels)
        assert total == loss and per_client == [loss]

    def test_mismatched_width_rejected(self):
        with pytest.raises(ValueError):
            domain_loss([(np.zeros((2, 3)), [0, 1]), (np.zeros((2, 4)), [0, 1])])

    def test_empty_client_batch_rejected(self):
        with pytest.raises(ValueError):
            domain_loss([(np.zeros((0, 3)), [])])


class TestMeanPrediction:
    def test_single_classifier_identity(self):
        p = softmax(np.random.default_rng(0).normal(size=(3, 4)))
        assert np.array_equal(mean_prediction([p]), p)

    def test_two_onehots(self):
        assert np.allclose(mean_prediction([np.array([[1.0, 0.0]]),
                                            np.array([[0.0, 1.0]])]),
                           [[0.5, 0.5]])

    def test_rows_stay_probability_vectors(self):
        rng = np.random.default_rng(3)
        preds = [softmax(rng.normal(size=(5, 7))) for _ in range(3)]
        mean = mean_prediction(preds)
        assert np.all(mean >= 0.0)
        assert np.abs(mean.sum(axis=1) - 1.0).max() < 1e-12


class TestConsistencyLoss:
    def test_identical_classifiers_zero(self):
        p = softmax(np.random.default_rng(1).normal(size=(4, 3)))
        loss, grads = consistency_loss([p.copy(), p.copy(), p.copy()])
        assert loss == 0.0
        for g in grads:
            assert np.all(g == 0.0)

    def test_single_classifier_zero(self):
        p = softmax(np.random.default_rng(2).normal(size=(4, 3)))
        loss, grads = consistency_loss([p])
        assert loss == 0.0
        assert np.all(grads[0] == 0.0)

    def test_hand_evaluated_two_classifier_case(self):
        # rows [1,0] and [0,1], one sample: mean [.5,.5], each residual norm
        # sqrt(.5); loss = (1/2)(sqrt(.5)+sqrt(.5)) = sqrt(.5)
        loss, _ = consistency_loss([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
        assert loss == pytest.approx(0.70710678, abs=1e-8)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        preds = [softmax(rng.normal(size=(3, 4))) for _ in range(3)]
        _, grads = consistency_loss(preds)
        for ci in range(3):
            def f(a, ci=ci):
                swapped = list(preds)
                swapped[ci] = a
                return consistency_loss(swapped)[0]
            for idx in np.ndindex(preds[ci].shape):
                numeric = numeric_gradient(f, preds[ci], idx)
                assert abs(grads[ci][idx] - numeric) / max(1e-12, abs(numeric)) < 1e-6

    def test_nonnegative_and_zero_iff_agreement(self):
        rng = np.random.default_rng(10)
        preds = [softmax(rng.normal(size=(4, 3))) for _ in range(3)]
        loss, _ = consistency_loss(preds)
        assert loss > 0.0
        agreeing = [preds[0].copy() for _ in range(3)]
        assert consistency_loss(agreeing)[0] <= 1e-12


class TestSoftmaxBackward:
    def test_chain_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(3, 5))
        projection = rng.normal(size=(3, 5))
        p = softmax(logits)
        analytic = softmax_backward(p, projection)
        f = lambda a: float((softmax(a) * projection).sum())
        for idx in np.ndindex(logits.shape):
            numeric = numeric_gradient(f, logits, idx)
            assert abs(analytic[idx] - numeric) / max(1e-12, abs(numeric)) < 1e-6
