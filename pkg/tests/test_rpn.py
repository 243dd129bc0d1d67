"""Tests de la RPN y de las operaciones sobre cajas"""

import numpy as np
import pytest
import tensorflow as tf

from config.settings import RPNConfig
from core.data_models import BACKGROUND
from core.rpn import (
    ROI_BOX_WEIGHTS, RPNHead, assign_anchors, box_iou, clip_boxes, decode_boxes, encode_boxes,
    generate_anchors, nms, propose, sample_rois
)

pytestmark = pytest.mark.unit


class TestBoxOps:

    def test_iou_values(self):
        a = np.array([[0.0, 0.0, 10.0, 10.0]])
        b = np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 0.0, 15.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
        np.testing.assert_allclose(box_iou(a, b), [[1.0, 50.0 / 150.0, 0.0]])

    def test_iou_empty(self):
        assert box_iou(np.zeros((0, 4)), np.ones((3, 4))).shape == (0, 3)

    def test_encode_decode_inverse(self, rng):
        src = np.sort(rng.uniform(0, 50, size=(20, 2, 2)), axis=1).reshape(20, 4)
        src[:, 2:] += 1.0
        dst = src + rng.normal(scale=2.0, size=src.shape)
        dst[:, 2:] = np.maximum(dst[:, 2:], dst[:, :2] + 1.0)
        for weights in [(1.0, 1.0, 1.0, 1.0), ROI_BOX_WEIGHTS]:
            np.testing.assert_allclose(decode_boxes(src, encode_boxes(src, dst, weights), weights), dst, atol=1e-9)

    def test_zero_deltas_keep_box(self):
        boxes = np.array([[2.0, 3.0, 12.0, 9.0]])
        np.testing.assert_allclose(decode_boxes(boxes, np.zeros((1, 4))), boxes)

    def test_clip(self):
        clipped = clip_boxes(np.array([[-5.0, -1.0, 70.0, 30.0]]), 32, 64)
        np.testing.assert_array_equal(clipped, [[0.0, 0.0, 64.0, 30.0]])

    def test_nms_suppresses_overlaps(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], dtype=np.float64)
        keep = nms(boxes, np.array([0.9, 0.8, 0.7]), 0.5, 10)
        assert keep.tolist() == [0, 2]
        assert nms(np.zeros((0, 4)), np.zeros(0), 0.5, 10).shape == (0,)


class TestAnchors:

    def test_count_and_centers(self):
        anchors = generate_anchors((3, 4), 8, (8.0, 16.0), (0.5, 1.0, 2.0))
        assert anchors.shape == (3 * 4 * 6, 4)
        centers = (anchors[:, :2] + anchors[:, 2:]) / 2
        np.testing.assert_allclose(centers[0], [4.0, 4.0])
        np.testing.assert_allclose(centers[6], [12.0, 4.0])

    def test_square_anchor_size(self):
        anchors = generate_anchors((1, 1), 16, (16.0,), (1.0,))
        np.testing.assert_allclose(anchors, [[0.0, 0.0, 16.0, 16.0]])

    def test_assignment_batch_size_and_labels(self, rng):
        config = RPNConfig(anchor_batch_size=32)
        anchors = generate_anchors((16, 16), 4, config.anchor_scales, config.anchor_ratios)
        gt = np.array([[10.0, 10.0, 24.0, 24.0], [40.0, 30.0, 54.0, 46.0]])
        targets = assign_anchors(anchors, gt, config, rng)
        assert len(targets.indices) == 32
        assert set(np.unique(targets.labels)) <= {0, 1}
        assert 1 <= targets.labels.sum() <= int(32 * config.anchor_positive_fraction)
        ious = box_iou(anchors[targets.indices], gt).max(axis=1)
        assert np.all(ious[targets.labels == 0] < config.negative_iou)
        np.testing.assert_array_equal(targets.box_targets[targets.labels == 0], 0.0)

    def test_every_object_gets_an_anchor(self, rng):
        config = RPNConfig(anchor_batch_size=256)
        anchors = generate_anchors((16, 16), 4, config.anchor_scales, config.anchor_ratios)
        gt = np.array([[0.0, 0.0, 3.0, 3.0]])
        targets = assign_anchors(anchors, gt, config, rng)
        assert targets.labels.sum() >= 1

    def test_no_objects_all_negative(self, rng):
        config = RPNConfig(anchor_batch_size=16)
        anchors = generate_anchors((4, 4), 4, (8.0,), (1.0,))
        targets = assign_anchors(anchors, np.zeros((0, 4)), config, rng)
        assert targets.labels.tolist() == [0] * 16


class TestRoISampling:

    def test_ground_truth_is_always_a_candidate(self, rng):
        config = RPNConfig(roi_batch_size=8)
        gt = np.array([[10.0, 10.0, 20.0, 20.0]])
        targets = sample_rois(np.array([[40.0, 40.0, 50.0, 50.0]]), gt, [3], config, rng)
        assert targets.num_foreground == 1
        assert targets.labels.tolist() == [3, BACKGROUND]
        np.testing.assert_allclose(targets.box_targets[0], 0.0, atol=1e-12)

    def test_foreground_fraction(self, rng):
        config = RPNConfig(roi_batch_size=8, roi_positive_fraction=0.25)
        gt = np.array([[10.0, 10.0, 20.0, 20.0]])
        proposals = np.tile(gt, (10, 1)) + rng.uniform(-0.5, 0.5, size=(10, 4))
        proposals = np.concatenate([proposals, np.array([[40.0, 40.0, 50.0, 50.0]] * 10)])
        targets = sample_rois(proposals, gt, [1], config, rng)
        assert len(targets.labels) == 8
        assert targets.num_foreground == 2

    def test_no_objects(self, rng):
        targets = sample_rois(np.ones((5, 4)) * [0, 0, 4, 4], np.zeros((0, 4)), [], RPNConfig(roi_batch_size=3), rng)
        assert targets.labels.tolist() == [BACKGROUND] * 3


class TestHeadAndProposals:

    def test_head_shapes(self, rng):
        head = RPNHead(8, 9, rng)
        logits, deltas = head(tf.zeros((16, 16, 8)))
        assert logits.shape == (16 * 16 * 9,)
        assert deltas.shape == (16 * 16 * 9, 4)

    def test_frozen_head_has_no_gradient(self, rng):
        head = RPNHead(4, 1, rng, dtype=tf.float64)
        x = tf.constant(rng.normal(size=(4, 4, 4)))
        head.frozen = True
        with tf.GradientTape() as tape:
            logits, _ = head(x)
            loss = tf.reduce_sum(logits)
        assert tape.gradient(loss, head.cls_kernel) is None

    def test_propose_is_sorted_and_bounded(self, rng):
        anchors = generate_anchors((8, 8), 8, (8.0, 16.0), (1.0,))
        logits = rng.normal(size=len(anchors))
        deltas = rng.normal(scale=0.1, size=(len(anchors), 4))
        boxes, scores = propose(anchors, logits, deltas, (64, 64), pre_nms=50, post_nms=10, nms_iou=0.7)
        assert len(boxes) <= 10
        assert np.all(np.diff(scores) <= 0)
        assert np.all(boxes >= 0.0) and np.all(boxes <= 64.0)
        assert np.all(boxes[:, 2] - boxes[:, 0] >= 1.0)
