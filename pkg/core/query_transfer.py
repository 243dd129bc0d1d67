"""query_transfer.py
Transferencia de feature queries a clases novel e integración entre shots

- compatibility: puntuaciones Q (X_ns W)^T, top-k sobre hw y peso por query
- select_and_duplicate: copia las n queries base más compatibles como
  parámetros nuevos e independientes de la clase novel
- integrate_shots: media ponderada por softmax (entre shots) de los
  prototipos de K shots, o media simple en modo 'mean'
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from core.data_models import FeatureMap, FeatureQuerySet, PrototypeSet, ProjectionParams, stack_queries
from utils.validators import Validators, check_shapes, validate_and_raise

logger = logging.getLogger(__name__)

SHOT_WEIGHT_MODES = ('per_query', 'per_shot_scalar', 'mean')


@dataclass(frozen=True)
class CompatibilityReport:
    """Compatibilidad de cada feature query base con el soporte de una clase novel

    per_query_weight[i] es la suma (en orden descendente) de sus k valores
    retenidos en topk_values[i].
    """
    per_query_weight: np.ndarray        # (n*c,)
    topk_values: np.ndarray             # (n*c, k)
    source_class_of_query: Tuple[int, ...]
    scores: np.ndarray                  # (n*c, hw) puntuaciones sin recortar


def default_topk(hw: int) -> int:
    """Profundidad top-k por defecto: max(1, hw // 4)"""
    return max(1, hw // 4)


def _ordered_sum(sorted_values: np.ndarray) -> np.ndarray:
    # suma secuencial de izquierda a derecha sobre el eje 1
    if sorted_values.shape[1] == 0:
        return np.zeros(sorted_values.shape[0], dtype=sorted_values.dtype)
    return np.cumsum(sorted_values, axis=1)[:, -1]


def _raw_scores(queries: tf.Tensor, support: FeatureMap, params: ProjectionParams) -> tf.Tensor:
    x_ns = support.flatten()
    check_shapes('X_ns', x_ns.shape, 'W', params.W.shape, 1, 0)
    check_shapes('Q', queries.shape, 'W', params.W.shape, 1, 1)
    return tf.matmul(queries, tf.matmul(x_ns, params.W), transpose_b=True)


def compatibility(
    base_queries: Sequence[FeatureQuerySet],
    support: FeatureMap,
    params: ProjectionParams,
    k: Optional[int] = None
) -> CompatibilityReport:
    """
    Compatibilidad entre las queries base apiladas y el mapa de soporte novel

    Args:
        base_queries: FeatureQuerySets de las clases base (se apilan en orden)
        support: Mapa de soporte (hw x d) de una clase novel
        params: Proyecciones entrenadas (se usa W, la misma de la destilación)
        k: Profundidad top-k (None -> default_topk(hw))

    Raises:
        ValidationError: Si no hay queries base o k > hw
    """
    validate_and_raise(bool(base_queries), "compatibility necesita al menos un conjunto de queries base")
    stacked, sources = stack_queries(base_queries)
    hw = support.height * support.width
    k = default_topk(hw) if k is None else Validators.validate_positive_int(k, 'k')
    validate_and_raise(k <= hw, f"k={k} supera hw={hw} del mapa de soporte")

    scores = _raw_scores(stacked, support, params).numpy()
    topk_values = tf.math.top_k(scores, k=k, sorted=True).values.numpy()
    weights = _ordered_sum(topk_values)
    return CompatibilityReport(
        per_query_weight=weights,
        topk_values=topk_values,
        source_class_of_query=sources,
        scores=scores,
    )


def merge_reports(reports: Sequence[CompatibilityReport]) -> CompatibilityReport:
    """Combina los informes de varios shots sumando los pesos por query"""
    validate_and_raise(bool(reports), "merge_reports necesita al menos un informe")
    sources = reports[0].source_class_of_query
    validate_and_raise(all(r.source_class_of_query == sources for r in reports[1:]),
                       "Los informes a combinar no comparten el apilado de queries")
    if len(reports) == 1:
        return reports[0]
    weights = np.stack([r.per_query_weight for r in reports], axis=1)
    return CompatibilityReport(
        per_query_weight=_ordered_sum(weights),
        topk_values=np.concatenate([r.topk_values for r in reports], axis=1),
        source_class_of_query=sources,
        scores=np.concatenate([r.scores for r in reports], axis=1),
    )


def selected_rows(report: CompatibilityReport, n: int) -> np.ndarray:
    """Índices de las n filas de mayor peso; empates por el índice más bajo"""
    total = len(report.per_query_weight)
    n = Validators.validate_positive_int(n, 'n')
    validate_and_raise(n <= total, f"n={n} supera el número de queries base ({total})")
    order = np.argsort(-report.per_query_weight, kind='stable')
    return order[:n]


def select_and_duplicate(
    report: CompatibilityReport,
    base_queries: Sequence[FeatureQuerySet],
    n: int,
    novel_class_id: int
) -> FeatureQuerySet:
    """
    Duplica las n queries base más compatibles para una clase novel

    Las copias son tf.Variable nuevas: entrenarlas no toca las filas base.
    """
    stacked, sources = stack_queries(base_queries)
    validate_and_raise(sources == report.source_class_of_query,
                       "El informe no corresponde a estas queries base")
    rows = selected_rows(report, n)
    copies = tf.Variable(tf.identity(tf.gather(stacked, rows)))
    chosen = sorted({sources[i] for i in rows})
    logger.info(f"✅ Clase novel {novel_class_id}: queries duplicadas desde filas {rows.tolist()} (clases {chosen})")
    return FeatureQuerySet(class_id=novel_class_id, queries=copies)


def shot_weights(
    query_set: FeatureQuerySet,
    shots: Sequence[FeatureMap],
    params: ProjectionParams,
    k: Optional[int] = None
) -> tf.Tensor:
    """Pesos (n x K) de las queries propias de una clase evaluadas en cada shot"""
    columns = []
    for shot in shots:
        report = compatibility([query_set], shot, params, k)
        columns.append(report.per_query_weight)
    return tf.constant(np.stack(columns, axis=1), dtype=query_set.queries.dtype)


def integrate_shots(
    prototype_per_shot: Sequence[PrototypeSet],
    weight_per_shot: tf.Tensor,
    mode: str = 'per_query'
) -> PrototypeSet:
    """
    Integra los prototipos de K shots con pesos normalizados por softmax

    Args:
        prototype_per_shot: K PrototypeSets (n x d) de la misma clase
        weight_per_shot: Pesos crudos (n x K)
        mode: 'per_query' (softmax por índice de query), 'per_shot_scalar'
              (media de pesos sobre las queries y un único softmax por shot) o
              'mean' (media simple de los shots; los pesos solo se validan)
    """
    validate_and_raise(bool(prototype_per_shot), "integrate_shots necesita K >= 1 shots")
    validate_and_raise(mode in SHOT_WEIGHT_MODES, f"Modo de integración desconocido: {mode}")
    class_ids = {ps.class_id for ps in prototype_per_shot}
    validate_and_raise(len(class_ids) == 1, f"Los shots pertenecen a clases distintas: {sorted(class_ids)}")
    shapes = {tuple(ps.prototypes.shape) for ps in prototype_per_shot}
    validate_and_raise(len(shapes) == 1, f"Los shots tienen formas distintas: {sorted(shapes)}")

    stacked = tf.stack([ps.prototypes for ps in prototype_per_shot], axis=0)  # (K, n, d)
    n, k_shots = int(stacked.shape[1]), int(stacked.shape[0])
    weights = tf.convert_to_tensor(weight_per_shot, dtype=stacked.dtype)
    check_shapes('weight_per_shot', weights.shape, 'prototypes', (n, k_shots), 0, 0)
    check_shapes('weight_per_shot', weights.shape, 'prototypes', (n, k_shots), 1, 1)
    Validators.validate_finite(weights, 'weight_per_shot')

    if mode == 'per_shot_scalar':
        weights = tf.broadcast_to(tf.reduce_mean(weights, axis=0, keepdims=True), (n, k_shots))
    elif mode == 'mean':
        weights = tf.zeros_like(weights)
    normalized = tf.nn.softmax(weights, axis=1)                 # (n, K)
    integrated = tf.einsum('ns,snd->nd', normalized, stacked)
    return PrototypeSet(prototype_per_shot[0].class_id, integrated)
