"""Tests de las pérdidas del detector"""

import numpy as np
import pytest
import tensorflow as tf

from core.losses import (
    LOSS_TERMS, DetectionTargets, DetectorPredictions, compute_losses, smooth_l1,
    softmax_cross_entropy
)
from utils.validators import ShapeError

pytestmark = pytest.mark.unit


def predictions(rng, anchors=6, pairs=5, classes=3) -> DetectorPredictions:
    return DetectorPredictions(
        rpn_logits=tf.constant(rng.normal(size=anchors)),
        rpn_deltas=tf.constant(rng.normal(size=(anchors, 4))),
        roi_class_logits=tf.constant(rng.normal(size=(pairs, 1 + classes))),
        roi_box_deltas=tf.constant(rng.normal(size=(pairs, 4))),
        meta_logits=tf.constant(rng.normal(size=(classes, classes))),
    )


def targets(rng, anchors=6, pairs=5, classes=3, positives=True) -> DetectionTargets:
    roi_positive = np.zeros(pairs, dtype=bool)
    if positives:
        roi_positive[:2] = True
    return DetectionTargets(
        rpn_labels=np.array([1, 0] * (anchors // 2)),
        rpn_box_targets=rng.normal(size=(anchors, 4)),
        roi_columns=np.where(roi_positive, 1, 0),
        roi_box_targets=rng.normal(size=(pairs, 4)),
        roi_positive=roi_positive,
        meta_columns=np.arange(classes),
    )


class TestElementaryLosses:

    def test_smooth_l1_regions(self):
        predicted = tf.constant([[0.5, 0.0, 2.0, -3.0]], dtype=tf.float64)
        loss = smooth_l1(predicted, tf.zeros_like(predicted))
        assert float(loss[0]) == pytest.approx(0.125 + 0.0 + 1.5 + 2.5)

    def test_smooth_l1_beta(self):
        predicted = tf.constant([[0.05, 0.0, 0.0, 0.0]], dtype=tf.float64)
        loss = smooth_l1(predicted, tf.zeros_like(predicted), beta=0.1)
        assert float(loss[0]) == pytest.approx(0.5 * 0.05 ** 2 / 0.1)

    def test_cross_entropy_uniform_logits(self):
        loss = softmax_cross_entropy(tf.zeros((4, 5), dtype=tf.float64), np.array([0, 1, 2, 4]))
        assert float(loss) == pytest.approx(np.log(5.0))

    def test_meta_term_prefers_own_class(self, rng):
        """El término meta es casi cero cuando cada prototipo puntúa su propia clase"""
        good = predictions(rng)
        good.meta_logits = 10.0 * tf.eye(3, dtype=tf.float64)
        bad = predictions(rng)
        bad.meta_logits = tf.zeros((3, 3), dtype=tf.float64)
        assert float(compute_losses(good, targets(rng)).terms['meta']) < 1e-3
        assert float(compute_losses(bad, targets(rng)).terms['meta']) == pytest.approx(np.log(3.0))


class TestComputeLosses:

    def test_all_terms_finite_and_non_negative(self, rng):
        for _ in range(10):
            losses = compute_losses(predictions(rng), targets(rng))
            values = losses.as_floats()
            assert set(values) == set(LOSS_TERMS) | {'total'}
            assert losses.is_finite()
            assert all(v >= 0.0 for v in values.values())
            assert values['total'] == pytest.approx(sum(values[t] for t in LOSS_TERMS))
            assert not losses.empty_targets

    def test_box_loss_only_on_positive_pairs(self, rng):
        losses = compute_losses(predictions(rng), targets(rng, positives=False))
        assert float(losses.terms['roi_box']) == 0.0
        assert float(losses.terms['roi_cls']) > 0.0

    def test_empty_targets_give_zero(self, rng):
        empty = DetectionTargets(
            rpn_labels=np.zeros(0), rpn_box_targets=np.zeros((0, 4)), roi_columns=np.zeros(0, dtype=np.int64),
            roi_box_targets=np.zeros((0, 4)), roi_positive=np.zeros(0, dtype=bool),
            meta_columns=np.zeros(0, dtype=np.int64),
        )
        losses = compute_losses(predictions(rng), empty)
        assert losses.empty_targets
        assert losses.as_floats()['total'] == 0.0

    def test_mismatched_targets_raise(self, rng):
        with pytest.raises(ShapeError):
            compute_losses(predictions(rng, pairs=5), targets(rng, pairs=4))

    def test_losses_are_differentiable(self, rng):
        logits = tf.Variable(rng.normal(size=(5, 4)))
        preds = predictions(rng)
        with tf.GradientTape() as tape:
            preds.roi_class_logits = logits
            total = compute_losses(preds, targets(rng)).total
        gradient = tape.gradient(total, logits)
        assert gradient is not None
        assert np.any(gradient.numpy() != 0.0)
