"""losses.py
Pérdidas del detector

- RPN: entropía cruzada binaria de objectness + smooth L1 de cajas
- RoI: entropía cruzada sobre [fondo] + roster y smooth L1 solo en pares POSITIVE
- Meta: clasificador lineal sobre los prototipos de clase, cada uno debe
  predecir su propia clase

compute_losses es una función pura: no toca parámetros ni estado global.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import tensorflow as tf

from utils.validators import check_shapes

logger = logging.getLogger(__name__)

LOSS_TERMS = ('rpn_cls', 'rpn_box', 'roi_cls', 'roi_box', 'meta')


@dataclass
class DetectorPredictions:
    """Salidas diferenciables de un episodio de entrenamiento"""
    rpn_logits: tf.Tensor       # (M,) anchors muestreados
    rpn_deltas: tf.Tensor       # (M, 4)
    roi_class_logits: tf.Tensor  # (P, 1 + c) columna 0 = fondo
    roi_box_deltas: tf.Tensor   # (P, 4)
    meta_logits: tf.Tensor      # (c, c)


@dataclass
class DetectionTargets:
    """Objetivos de un episodio (arrays NumPy)"""
    rpn_labels: np.ndarray      # (M,) 0/1
    rpn_box_targets: np.ndarray  # (M, 4)
    roi_columns: np.ndarray     # (P,) 0 = fondo, 1 + posición en el roster
    roi_box_targets: np.ndarray  # (P, 4)
    roi_positive: np.ndarray    # (P,) bool, pares POSITIVE
    meta_columns: np.ndarray    # (c,)

    @property
    def is_empty(self) -> bool:
        return len(self.rpn_labels) == 0 and len(self.roi_columns) == 0 and len(self.meta_columns) == 0


@dataclass
class LossBreakdown:
    """Diccionario de pérdidas más el total"""
    terms: Dict[str, tf.Tensor] = field(default_factory=dict)
    empty_targets: bool = False

    @property
    def total(self) -> tf.Tensor:
        return tf.add_n([self.terms[name] for name in LOSS_TERMS])

    def as_floats(self) -> Dict[str, float]:
        values = {name: float(self.terms[name]) for name in LOSS_TERMS}
        values['total'] = float(self.total)
        return values

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_floats().values())


def smooth_l1(predicted: tf.Tensor, target: tf.Tensor, beta: float = 1.0) -> tf.Tensor:
    """Smooth L1 por elemento sumado sobre las 4 coordenadas"""
    diff = tf.abs(predicted - target)
    per_coord = tf.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return tf.reduce_sum(per_coord, axis=-1)


def softmax_cross_entropy(logits: tf.Tensor, columns: np.ndarray) -> tf.Tensor:
    """Entropía cruzada media con objetivos enteros"""
    depth = int(logits.shape[-1])
    one_hot = tf.one_hot(columns, depth, dtype=logits.dtype)
    return tf.reduce_mean(-tf.reduce_sum(one_hot * tf.nn.log_softmax(logits, axis=-1), axis=-1))


def _zero(dtype) -> tf.Tensor:
    return tf.zeros((), dtype=dtype)


def compute_losses(predictions: DetectorPredictions, targets: DetectionTargets) -> LossBreakdown:
    """
    Calcula todas las pérdidas de un episodio

    Conjuntos de objetivos vacíos producen pérdidas cero y marcan
    empty_targets (el llamador decide si registrar un aviso).
    """
    dtype = predictions.roi_class_logits.dtype
    terms: Dict[str, tf.Tensor] = {name: _zero(dtype) for name in LOSS_TERMS}

    if targets.is_empty:
        logger.warning("⚠️ Episodio sin objetivos: pérdidas a cero")
        return LossBreakdown(terms=terms, empty_targets=True)

    # RPN
    if len(targets.rpn_labels) > 0:
        check_shapes('rpn_logits', predictions.rpn_logits.shape, 'rpn_labels', targets.rpn_labels.shape, 0, 0)
        labels = tf.constant(targets.rpn_labels, dtype=dtype)
        terms['rpn_cls'] = tf.reduce_mean(
            tf.nn.sigmoid_cross_entropy_with_logits(labels=labels, logits=predictions.rpn_logits)
        )
        positive = targets.rpn_labels == 1
        if positive.any():
            box_loss = smooth_l1(
                tf.boolean_mask(predictions.rpn_deltas, positive),
                tf.constant(targets.rpn_box_targets[positive], dtype=dtype),
                beta=1.0 / 9.0,
            )
            terms['rpn_box'] = tf.reduce_sum(box_loss) / float(len(targets.rpn_labels))

    # RoI
    if len(targets.roi_columns) > 0:
        check_shapes('roi_class_logits', predictions.roi_class_logits.shape,
                     'roi_columns', targets.roi_columns.shape, 0, 0)
        terms['roi_cls'] = softmax_cross_entropy(predictions.roi_class_logits, targets.roi_columns)
        positive = np.asarray(targets.roi_positive, dtype=bool)
        if positive.any():
            box_loss = smooth_l1(
                tf.boolean_mask(predictions.roi_box_deltas, positive),
                tf.constant(targets.roi_box_targets[positive], dtype=dtype),
            )
            terms['roi_box'] = tf.reduce_sum(box_loss) / float(len(targets.roi_columns))

    # Meta
    if len(targets.meta_columns) > 0:
        check_shapes('meta_logits', predictions.meta_logits.shape, 'meta_columns', targets.meta_columns.shape, 0, 0)
        terms['meta'] = softmax_cross_entropy(predictions.meta_logits, targets.meta_columns)

    return LossBreakdown(terms=terms, empty_targets=False)

