"""rpn.py
Red de propuestas de regiones y utilidades de cajas

Cajas en coordenadas de píxel (x1, y1, x2, y2). La asignación de anchors,
el muestreo de RoIs y la decodificación de propuestas se hacen en NumPy
(sin gradiente); solo la cabeza de la RPN es diferenciable.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import tensorflow as tf

from config.settings import RPNConfig
from core.backbone import FreezableModule
from core.data_models import BACKGROUND, normal_variable

logger = logging.getLogger(__name__)

RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


# ==============================================================================
# OPERACIONES SOBRE CAJAS
# ==============================================================================

def box_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Matriz IoU (len(a) x len(b))"""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    top_left = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    bottom_right = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    inter = np.prod(np.clip(bottom_right - top_left, 0.0, None), axis=2)
    area_a = np.prod(boxes_a[:, 2:] - boxes_a[:, :2], axis=1)
    area_b = np.prod(boxes_b[:, 2:] - boxes_b[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(src: np.ndarray, dst: np.ndarray,
                 weights: Sequence[float] = RPN_BOX_WEIGHTS) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) que llevan src a dst"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    eps = np.finfo(np.float64).eps
    src_w = np.maximum(src[:, 2] - src[:, 0], eps)
    src_h = np.maximum(src[:, 3] - src[:, 1], eps)
    src_cx = src[:, 0] + 0.5 * src_w
    src_cy = src[:, 1] + 0.5 * src_h
    dst_w = np.maximum(dst[:, 2] - dst[:, 0], eps)
    dst_h = np.maximum(dst[:, 3] - dst[:, 1], eps)
    dst_cx = dst[:, 0] + 0.5 * dst_w
    dst_cy = dst[:, 1] + 0.5 * dst_h
    return np.stack([
        wx * (dst_cx - src_cx) / src_w,
        wy * (dst_cy - src_cy) / src_h,
        ww * np.log(dst_w / src_w),
        wh * np.log(dst_h / src_h),
    ], axis=1)


def decode_boxes(src: np.ndarray, deltas: np.ndarray,
                 weights: Sequence[float] = RPN_BOX_WEIGHTS) -> np.ndarray:
    """Inversa de encode_boxes (dw, dh recortados para evitar overflow)"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    src_w = src[:, 2] - src[:, 0]
    src_h = src[:, 3] - src[:, 1]
    src_cx = src[:, 0] + 0.5 * src_w
    src_cy = src[:, 1] + 0.5 * src_h
    cx = deltas[:, 0] / wx * src_w + src_cx
    cy = deltas[:, 1] / wy * src_h + src_cy
    w = np.exp(np.minimum(deltas[:, 2] / ww, _MAX_LOG_SCALE)) * src_w
    h = np.exp(np.minimum(deltas[:, 3] / wh, _MAX_LOG_SCALE)) * src_h
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(width))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(height))
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_output: int) -> np.ndarray:
    """Índices conservados por NMS, ordenados por score descendente"""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0,), dtype=np.int64)
    # tf.image trabaja en (y1, x1, y2, x2)
    yx_boxes = boxes[:, [1, 0, 3, 2]]
    keep = tf.image.non_max_suppression(
        yx_boxes, np.asarray(scores, dtype=np.float32), max_output_size=max_output,
        iou_threshold=iou_threshold
    )
    return keep.numpy().astype(np.int64)


def generate_anchors(feature_hw: Tuple[int, int], stride: int, scales: Sequence[float],
                     ratios: Sequence[float]) -> np.ndarray:
    """Anchors (H*W*A x 4) en orden fila-mayor por celda, A = len(ratios) * len(scales)"""
    base = []
    for ratio in ratios:
        for scale in scales:
            h = scale * np.sqrt(ratio)
            w = scale / np.sqrt(ratio)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base = np.asarray(base, dtype=np.float64)
    height, width = feature_hw
    shift_x = (np.arange(width) + 0.5) * stride
    shift_y = (np.arange(height) + 0.5) * stride
    shift_x, shift_y = np.meshgrid(shift_x, shift_y)
    shifts = np.stack([shift_x.ravel(), shift_y.ravel(), shift_x.ravel(), shift_y.ravel()], axis=1)
    anchors = shifts[:, None, :] + base[None, :, :]
    return anchors.reshape(-1, 4)


# ==============================================================================
# ASIGNACIÓN DE OBJETIVOS
# ==============================================================================

@dataclass(frozen=True)
class AnchorTargets:
    """Anchors muestreados para la pérdida de la RPN"""
    indices: np.ndarray       # (M,) índices en la lista de anchors
    labels: np.ndarray        # (M,) 1 objeto / 0 fondo
    box_targets: np.ndarray   # (M, 4) deltas (ceros para fondo)


def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, config: RPNConfig,
                   rng: np.random.Generator) -> AnchorTargets:
    """
    Etiqueta anchors por IoU y muestrea anchor_batch_size de ellos

    Positivo: IoU >= positive_iou o mejor anchor de algún objeto;
    negativo: IoU < negative_iou; el resto se ignora.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    matched = np.zeros(len(anchors), dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
    else:
        ious = box_iou(anchors, gt_boxes)
        matched = ious.argmax(axis=1)
        max_iou = ious.max(axis=1)
        labels[max_iou < config.negative_iou] = 0
        best_per_gt = ious.max(axis=0)
        best_anchor = np.where((ious == best_per_gt[None, :]) & (best_per_gt[None, :] > 0))[0]
        labels[best_anchor] = 1
        labels[max_iou >= config.positive_iou] = 1

    positives = np.flatnonzero(labels == 1)
    n_pos = min(len(positives), int(config.anchor_batch_size * config.anchor_positive_fraction))
    if len(positives) > n_pos:
        positives = rng.choice(positives, size=n_pos, replace=False)
    negatives = np.flatnonzero(labels == 0)
    n_neg = min(len(negatives), config.anchor_batch_size - n_pos)
    if len(negatives) > n_neg:
        negatives = rng.choice(negatives, size=n_neg, replace=False)

    indices = np.concatenate([positives, negatives]).astype(np.int64)
    sampled_labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))]).astype(np.int64)
    box_targets = np.zeros((len(indices), 4), dtype=np.float64)
    if len(positives) > 0:
        box_targets[:len(positives)] = encode_boxes(anchors[positives], gt_boxes[matched[positives]],
                                                    RPN_BOX_WEIGHTS)
    return AnchorTargets(indices=indices, labels=sampled_labels, box_targets=box_targets)


@dataclass(frozen=True)
class RoITargets:
    """RoIs muestreadas para la cabeza de detección"""
    boxes: np.ndarray         # (R, 4)
    labels: np.ndarray        # (R,) clase del objeto o BACKGROUND
    box_targets: np.ndarray   # (R, 4) deltas con ROI_BOX_WEIGHTS

    @property
    def num_foreground(self) -> int:
        return int(np.sum(self.labels != BACKGROUND))


def sample_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: Sequence[int],
                config: RPNConfig, rng: np.random.Generator) -> RoITargets:
    """Muestrea roi_batch_size RoIs (propuestas + cajas GT) con roi_positive_fraction de primer plano"""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    rois = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes], axis=0)

    if len(gt_boxes) == 0:
        n_bg = min(len(rois), config.roi_batch_size)
        keep = rng.choice(len(rois), size=n_bg, replace=False) if len(rois) > n_bg else np.arange(len(rois))
        return RoITargets(rois[keep], np.full(len(keep), BACKGROUND, dtype=np.int64),
                          np.zeros((len(keep), 4), dtype=np.float64))

    ious = box_iou(rois, gt_boxes)
    matched = ious.argmax(axis=1)
    max_iou = ious.max(axis=1)

    foreground = np.flatnonzero(max_iou >= config.roi_positive_iou)
    n_fg = min(len(foreground), int(round(config.roi_batch_size * config.roi_positive_fraction)))
    if len(foreground) > n_fg:
        foreground = rng.choice(foreground, size=n_fg, replace=False)
    background = np.flatnonzero(max_iou < config.roi_positive_iou)
    n_bg = min(len(background), config.roi_batch_size - n_fg)
    if len(background) > n_bg:
        background = rng.choice(background, size=n_bg, replace=False)

    keep = np.concatenate([foreground, background]).astype(np.int64)
    labels = np.full(len(keep), BACKGROUND, dtype=np.int64)
    labels[:len(foreground)] = gt_labels[matched[foreground]]
    box_targets = np.zeros((len(keep), 4), dtype=np.float64)
    if len(foreground) > 0:
        box_targets[:len(foreground)] = encode_boxes(rois[foreground], gt_boxes[matched[foreground]],
                                                     ROI_BOX_WEIGHTS)
    return RoITargets(rois[keep], labels, box_targets)


# ==============================================================================
# CABEZA Y PROPUESTAS
# ==============================================================================

class RPNHead(FreezableModule):
    """Conv 3x3 compartida + salidas 1x1 de objectness (A) y deltas (4A)"""

    def __init__(self, channels: int, num_anchors: int, rng: np.random.Generator,
                 dtype=tf.float32, name: str = 'rpn'):
        super().__init__(name=name)
        dtype = tf.as_dtype(dtype)
        self.num_anchors = num_anchors
        self.conv_kernel = normal_variable(rng, (3, 3, channels, channels), 0.01, dtype)
        self.conv_bias = tf.Variable(tf.zeros((channels,), dtype=dtype))
        self.cls_kernel = normal_variable(rng, (1, 1, channels, num_anchors), 0.01, dtype)
        self.cls_bias = tf.Variable(tf.zeros((num_anchors,), dtype=dtype))
        self.box_kernel = normal_variable(rng, (1, 1, channels, 4 * num_anchors), 0.01, dtype)
        self.box_bias = tf.Variable(tf.zeros((4 * num_anchors,), dtype=dtype))

    def named_variables(self):
        return {
            'conv/kernel': self.conv_kernel, 'conv/bias': self.conv_bias,
            'cls/kernel': self.cls_kernel, 'cls/bias': self.cls_bias,
            'box/kernel': self.box_kernel, 'box/bias': self.box_bias,
        }

    def __call__(self, feature_map: tf.Tensor) -> Tuple[tf.Tensor, tf.Tensor]:
        """(H, W, d) -> logits (H*W*A,), deltas (H*W*A, 4)"""
        x = feature_map[tf.newaxis] if feature_map.shape.rank == 3 else feature_map
        hidden = tf.nn.relu(
            tf.nn.conv2d(x, self.read(self.conv_kernel), strides=1, padding='SAME') + self.read(self.conv_bias)
        )
        logits = tf.nn.conv2d(hidden, self.read(self.cls_kernel), strides=1, padding='VALID') + self.read(self.cls_bias)
        deltas = tf.nn.conv2d(hidden, self.read(self.box_kernel), strides=1, padding='VALID') + self.read(self.box_bias)
        return tf.reshape(logits, (-1,)), tf.reshape(deltas, (-1, 4))


def propose(anchors: np.ndarray, logits: np.ndarray, deltas: np.ndarray, image_hw: Tuple[int, int],
            pre_nms: int, post_nms: int, nms_iou: float, min_size: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Decodifica, recorta, filtra cajas pequeñas y aplica NMS

    Returns:
        (boxes (P, 4), scores (P,)) ordenadas por score descendente
    """
    height, width = image_hw
    boxes = clip_boxes(decode_boxes(anchors, deltas, RPN_BOX_WEIGHTS), height, width)
    scores = np.asarray(logits, dtype=np.float64)
    sizes = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    valid = np.flatnonzero(sizes >= min_size)
    boxes, scores = boxes[valid], scores[valid]

    order = np.argsort(-scores, kind='stable')[:pre_nms]
    boxes, scores = boxes[order], scores[order]
    keep = nms(boxes, scores, nms_iou, post_nms)
    return boxes[keep], scores[keep]
