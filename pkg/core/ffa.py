"""ffa.py
Agregación de características de grano fino (FFA)

- Destilación: cada clase usa sus feature queries para resumir el mapa de
  soporte en n prototipos de grano fino (atención cruzada sobre hw).
- Asignación: los prototipos de todas las clases más los de fondo se
  asignan al mapa de consulta con una conexión residual controlada por alpha.
- Emparejamiento denso: atención directa de la consulta sobre todas las
  celdas de soporte, usada solo como rama de ablación.

Atención de una sola cabeza, sin normalización ni dropout.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import tensorflow as tf

from core.data_models import (
    BACKGROUND, FeatureMap, FeatureQuerySet, PrototypeBank, PrototypeSet, ProjectionParams
)
from utils.validators import ValidationError, check_shapes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffinityMatrix:
    """Matriz de afinidad tras softmax

    rows/cols describen la semántica de cada eje; normalized_axis es el eje
    (0 o 1) sobre el que se aplicó softmax.
    """
    values: tf.Tensor
    rows: str
    cols: str
    normalized_axis: int

    def slice_sums(self) -> tf.Tensor:
        return tf.reduce_sum(self.values, axis=self.normalized_axis)


def _scaled_softmax(logits: tf.Tensor, d_prime: int) -> tf.Tensor:
    scale = tf.sqrt(tf.cast(d_prime, logits.dtype))
    return tf.nn.softmax(logits / scale, axis=-1)


def distill_prototypes_with_affinity(
    support: FeatureMap,
    query_set: FeatureQuerySet,
    params: ProjectionParams
) -> Tuple[PrototypeSet, AffinityMatrix]:
    """
    Destila los prototipos de una clase y devuelve también la afinidad

    A = softmax(q (X_s W)^T / sqrt(d')) sobre hw;  p = A X_s + E_cls
    """
    x_s = support.flatten()
    check_shapes('X_s', x_s.shape, 'W', params.W.shape, 1, 0, 'canales de soporte != filas de W')
    check_shapes('q', query_set.queries.shape, 'W', params.W.shape, 1, 1, "d' de las queries != columnas de W")

    keys = tf.matmul(x_s, params.W)                              # (hw, d')
    logits = tf.matmul(query_set.queries, keys, transpose_b=True)  # (n, hw)
    affinity = _scaled_softmax(logits, params.d_prime)
    prototypes = tf.matmul(affinity, x_s) + params.class_embedding(query_set.class_id)[tf.newaxis, :]

    return (
        PrototypeSet(query_set.class_id, prototypes),
        AffinityMatrix(affinity, rows='queries', cols='support_positions', normalized_axis=1),
    )


def distill_prototypes(support: FeatureMap, query_set: FeatureQuerySet,
                       params: ProjectionParams) -> PrototypeSet:
    """Destila n prototipos (n x d) a partir de un mapa de soporte"""
    prototypes, _ = distill_prototypes_with_affinity(support, query_set, params)
    return prototypes


def build_prototype_bank(per_class: Sequence[PrototypeSet], params: ProjectionParams) -> PrototypeBank:
    """
    Concatena los prototipos de cada clase (en orden) y los de fondo

    Raises:
        ValidationError: Si no hay clases o hay clases repetidas
    """
    if not per_class:
        raise ValidationError("El banco de prototipos necesita al menos una clase")
    class_ids = [ps.class_id for ps in per_class]
    if len(set(class_ids)) != len(class_ids):
        raise ValidationError(f"Clases repetidas en el banco de prototipos: {class_ids}")
    for ps in per_class:
        check_shapes(f'p[{ps.class_id}]', ps.prototypes.shape, 'background_queries',
                     params.background_queries.shape, 1, 1)

    rows = tf.concat([ps.prototypes for ps in per_class] + [params.background_queries], axis=0)
    labels: List[int] = [ps.class_id for ps in per_class for _ in range(ps.n)]
    labels += [BACKGROUND] * params.n_bg
    return PrototypeBank(rows=rows, row_labels=tuple(labels))


def assign_prototypes_with_affinity(
    query: FeatureMap,
    bank: PrototypeBank,
    params: ProjectionParams
) -> Tuple[FeatureMap, AffinityMatrix]:
    """
    Asigna el banco al mapa de consulta y devuelve también A'

    A' = softmax((X_q W')(P W')^T / sqrt(d')) sobre el eje de prototipos
    X_q' = X_q + alpha * A' P
    """
    if bank.size == 0:
        raise ValidationError("El banco de prototipos está vacío")
    x_q = query.flatten()
    check_shapes('X_q', x_q.shape, 'P', bank.rows.shape, 1, 1, 'canales de consulta != ancho del banco')
    check_shapes('X_q', x_q.shape, "W'", params.W_prime.shape, 1, 0)

    projected_query = tf.matmul(x_q, params.W_prime)       # (HW, d')
    projected_bank = tf.matmul(bank.rows, params.W_prime)  # (B, d')
    logits = tf.matmul(projected_query, projected_bank, transpose_b=True)
    affinity = _scaled_softmax(logits, params.d_prime)     # (HW, B)
    assigned = tf.matmul(affinity, bank.rows)              # (HW, d)

    aggregated = x_q + params.alpha * assigned
    return (
        FeatureMap.from_flat(aggregated, query.height, query.width),
        AffinityMatrix(affinity, rows='query_positions', cols='prototypes', normalized_axis=1),
    )


def assign_prototypes(query: FeatureMap, bank: PrototypeBank, params: ProjectionParams) -> FeatureMap:
    """Mapa de consulta agregado, misma forma que la entrada"""
    aggregated, _ = assign_prototypes_with_affinity(query, bank, params)
    return aggregated


def dense_match_baseline(
    query: FeatureMap,
    supports: Sequence[Tuple[int, FeatureMap]],
    params: ProjectionParams
) -> FeatureMap:
    """
    Emparejamiento denso consulta-soporte (rama de ablación)

    La consulta atiende directamente a todas las celdas de soporte de todas
    las clases. La consulta se proyecta con W' y las celdas de soporte con W,
    así la rama usa los mismos parámetros que FFA.
    """
    if not supports:
        raise ValidationError("El emparejamiento denso necesita al menos un mapa de soporte")
    x_q = query.flatten()
    cells = []
    for class_id, support in supports:
        flat = support.flatten()
        check_shapes('X_q', x_q.shape, f'X_s[{class_id}]', flat.shape, 1, 1)
        cells.append(flat)
    support_cells = tf.concat(cells, axis=0)               # (c*hw, d)

    projected_query = tf.matmul(x_q, params.W_prime)
    projected_support = tf.matmul(support_cells, params.W)
    logits = tf.matmul(projected_query, projected_support, transpose_b=True)
    affinity = _scaled_softmax(logits, params.d_prime)
    aggregated = x_q + params.alpha * tf.matmul(affinity, support_cells)
    return FeatureMap.from_flat(aggregated, query.height, query.width)
