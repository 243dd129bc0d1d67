"""detector.py
Detector episódico de dos ramas

Flujo de un episodio:
    características medias (consulta y soporte, backbone compartido)
    -> agregación (FFA, emparejamiento denso o ninguna) sobre la consulta
    -> RPN sobre el mapa agregado -> RoIs -> etapa alta (2d)
    -> emparejamiento RoI-prototipo (B-CAS / específico / agnóstico en TRAIN,
       todas las clases en TEST) -> fusión -> cabeza de detección

En TRAIN devuelve el LossBreakdown; en TEST una lista de Detection.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from config.settings import EvalConfig, ModelConfig, TrainingConfig
from core.backbone import Backbone, pooled_high, stack_images
from core.data_models import (
    Detection, Episode, FeatureMap, FeatureQuerySet, Mode, PrototypeBank,
    ProjectionParams, QueryImage, normal_variable
)
from core.ffa import assign_prototypes, build_prototype_bank, dense_match_baseline, distill_prototypes
from core.fusion import AffineLayer, FusionParams, fusion_fn
from core.losses import DetectionTargets, DetectorPredictions, compute_losses
from core.query_transfer import integrate_shots, shot_weights
from core.rpn import (
    ROI_BOX_WEIGHTS, RPNHead, assign_anchors, clip_boxes, decode_boxes, generate_anchors, nms,
    propose, sample_rois
)
from strategies import build_sampler
from utils.validators import ValidationError

logger = logging.getLogger(__name__)


# ==============================================================================
# CABEZAS
# ==============================================================================

class DetectionHead(tf.Module):
    """
    Cabeza de dos capas sobre el vector fusionado (2d)

    Clasificador con una columna de fondo más una columna por clase
    (seleccionadas según el roster del episodio) y regresión de cajas
    agnóstica de clase.
    """

    def __init__(self, width: int, hidden: int, class_ids: Sequence[int],
                 rng: np.random.Generator, dtype=tf.float32, name: str = 'head'):
        super().__init__(name=name)
        self.dtype = tf.as_dtype(dtype)
        self.hidden_width = hidden
        self.hidden = AffineLayer(width, hidden, rng, dtype, rectify=True, name='hidden')
        self.box = AffineLayer(hidden, 4, rng, dtype, rectify=False, name='box', init_scale=0.001)
        self.background_weight = normal_variable(rng, (hidden,), 0.01, self.dtype)
        self.background_bias = tf.Variable(tf.zeros((), dtype=self.dtype))
        self.class_weights: Dict[int, tf.Variable] = {}
        self.class_biases: Dict[int, tf.Variable] = {}
        for class_id in class_ids:
            self.class_weights[int(class_id)] = normal_variable(rng, (hidden,), 0.01, self.dtype)
            self.class_biases[int(class_id)] = tf.Variable(tf.zeros((), dtype=self.dtype))

    def add_class(self, class_id: int):
        if class_id in self.class_weights:
            raise ValidationError(f"La cabeza ya tiene la clase {class_id}")
        self.class_weights[class_id] = tf.Variable(tf.zeros((self.hidden_width,), dtype=self.dtype))
        self.class_biases[class_id] = tf.Variable(tf.zeros((), dtype=self.dtype))

    def named_variables(self) -> Dict[str, tf.Variable]:
        named = {
            'hidden/kernel': self.hidden.kernel, 'hidden/bias': self.hidden.bias,
            'box/kernel': self.box.kernel, 'box/bias': self.box.bias,
            'cls_bg/weight': self.background_weight, 'cls_bg/bias': self.background_bias,
        }
        for class_id in sorted(self.class_weights):
            named[f'cls/{class_id}/weight'] = self.class_weights[class_id]
            named[f'cls/{class_id}/bias'] = self.class_biases[class_id]
        return named

    def __call__(self, fused: tf.Tensor, roster: Sequence[int]) -> Tuple[tf.Tensor, tf.Tensor]:
        """(N, 2d) -> logits (N, 1 + c), deltas (N, 4)"""
        hidden = self.hidden(fused)
        weights = tf.stack([self.background_weight] + [self.class_weights[c] for c in roster], axis=1)
        biases = tf.stack([self.background_bias] + [self.class_biases[c] for c in roster], axis=0)
        return tf.matmul(hidden, weights) + biases, self.box(hidden)


class MetaClassifier(tf.Module):
    """Clasificador lineal de prototipos de clase (pérdida meta)"""

    def __init__(self, width: int, class_ids: Sequence[int], rng: np.random.Generator,
                 dtype=tf.float32, name: str = 'meta'):
        super().__init__(name=name)
        self.width = width
        self.dtype = tf.as_dtype(dtype)
        self.weights: Dict[int, tf.Variable] = {}
        self.biases: Dict[int, tf.Variable] = {}
        for class_id in class_ids:
            self.weights[int(class_id)] = normal_variable(rng, (width,), 0.01, self.dtype)
            self.biases[int(class_id)] = tf.Variable(tf.zeros((), dtype=self.dtype))

    def add_class(self, class_id: int):
        self.weights[class_id] = tf.Variable(tf.zeros((self.width,), dtype=self.dtype))
        self.biases[class_id] = tf.Variable(tf.zeros((), dtype=self.dtype))

    def named_variables(self) -> Dict[str, tf.Variable]:
        named = {}
        for class_id in sorted(self.weights):
            named[f'{class_id}/weight'] = self.weights[class_id]
            named[f'{class_id}/bias'] = self.biases[class_id]
        return named

    def __call__(self, prototypes: tf.Tensor, roster: Sequence[int]) -> tf.Tensor:
        weights = tf.stack([self.weights[c] for c in roster], axis=1)
        biases = tf.stack([self.biases[c] for c in roster], axis=0)
        return tf.matmul(prototypes, weights) + biases


# ==============================================================================
# CONTEXTO DE SOPORTE
# ==============================================================================

@dataclass
class SupportContext:
    """Todo lo que la rama de soporte aporta a las consultas de un episodio

    En evaluación se construye una vez y se reutiliza para todas las imágenes.
    """
    roster: Tuple[int, ...]
    class_prototypes: tf.Tensor                      # (c, 2d) en orden del roster
    bank: Optional[PrototypeBank] = None             # agregación FFA
    dense_supports: List[Tuple[int, FeatureMap]] = field(default_factory=list)

    def class_position(self, class_id: int) -> int:
        return self.roster.index(class_id)


# ==============================================================================
# DETECTOR
# ==============================================================================

class FewShotDetector(tf.Module):
    """
    Detector few-shot con agregación de grano fino y fusión de alto nivel

    Args:
        config: ModelConfig (variante, dimensiones, RPN)
        class_ids: Clases con parámetros inicializados aleatoriamente
        rng: Generador con semilla para toda la inicialización
    """

    def __init__(self, config: ModelConfig, class_ids: Sequence[int], rng: np.random.Generator,
                 name: str = 'detector'):
        super().__init__(name=name)
        self.config = config
        self.dtype = tf.as_dtype(config.dtype)
        self.variant = config.variant_spec
        self.class_ids: List[int] = [int(c) for c in class_ids]
        d = config.d
        width = 2 * d
        hidden = config.head_hidden or width

        self.backbone = Backbone(config.backbone, rng, self.dtype)
        num_anchors = len(config.rpn.anchor_scales) * len(config.rpn.anchor_ratios)
        self.rpn = RPNHead(d, num_anchors, rng, self.dtype)
        self.projection = ProjectionParams(d, config.resolved_d_prime, config.resolved_n_bg,
                                           self.class_ids, rng, self.dtype)
        self.queries: Dict[int, FeatureQuerySet] = {}
        for class_id in self.class_ids:
            self.queries[class_id] = FeatureQuerySet.initialize(
                class_id, config.n_queries, config.resolved_d_prime, rng, self.dtype
            )
        self.fusion = FusionParams(width, rng, self.dtype)
        self.head = DetectionHead(width, hidden, self.class_ids, rng, self.dtype)
        self.meta = MetaClassifier(width, self.class_ids, rng, self.dtype)

        self.sampler = build_sampler(self.variant.sampler, config.background_pairs)
        self._fuse = fusion_fn(self.variant.fusion)
        self._anchor_cache: Dict[Tuple[int, int], np.ndarray] = {}
        logger.info(
            f"✅ Detector creado: variante={config.variant}, d={d}, clases={self.class_ids}, "
            f"parámetros={self.parameter_count():,}"
        )

    # ---------------------------------------------------------------- registro

    def add_class(self, class_id: int, query_set: Optional[FeatureQuerySet] = None):
        """Registra una clase nueva (embedding, columnas de cabeza y meta a cero)"""
        class_id = int(class_id)
        if class_id in self.queries:
            raise ValidationError(f"La clase {class_id} ya está registrada")
        if query_set is None:
            query_set = FeatureQuerySet(class_id, tf.Variable(
                tf.zeros((self.config.n_queries, self.config.resolved_d_prime), dtype=self.dtype)
            ))
        if query_set.class_id != class_id:
            raise ValidationError("El conjunto de queries pertenece a otra clase")
        self.projection.add_class(class_id)
        self.queries[class_id] = query_set
        self.head.add_class(class_id)
        self.meta.add_class(class_id)
        self.class_ids.append(class_id)

    def named_variables(self) -> Dict[str, tf.Variable]:
        """Registro único nombre -> variable (orden estable)"""
        named: Dict[str, tf.Variable] = {}
        for prefix, module_vars in (
            ('backbone', self.backbone.named_variables()),
            ('rpn', self.rpn.named_variables()),
        ):
            for key, var in module_vars.items():
                named[f'{prefix}/{key}'] = var
        named['ffa/W'] = self.projection.W
        named['ffa/W_prime'] = self.projection.W_prime
        named['ffa/alpha'] = self.projection.alpha
        named['ffa/background'] = self.projection.background_queries
        for class_id in sorted(self.queries):
            named[f'ffa/queries/{class_id}'] = self.queries[class_id].queries
            named[f'ffa/embedding/{class_id}'] = self.projection.class_embeddings[class_id]
        for key, var in self.fusion.named_variables().items():
            named[f'fusion/{key}'] = var
        for key, var in self.head.named_variables().items():
            named[f'head/{key}'] = var
        for key, var in self.meta.named_variables().items():
            named[f'meta/{key}'] = var
        return named

    def parameter_count(self) -> int:
        return int(sum(np.prod(v.shape) for v in self.named_variables().values()))

    def _uses(self, name: str) -> bool:
        """Si la variante actual usa la variable"""
        if name.startswith('ffa/'):
            if self.variant.aggregation == 'none':
                return False
            if self.variant.aggregation == 'dense':
                return name in ('ffa/W', 'ffa/W_prime', 'ffa/alpha')
        if name.startswith('fusion/') and self.variant.fusion != 'nlf':
            return False
        return True

    def _frozen(self, name: str) -> bool:
        if name.startswith('backbone/'):
            stage_name = name.split('/')[1]
            return any(stage.frozen for stage in self.backbone.stages if stage.name == stage_name)
        if name.startswith('rpn/'):
            return self.rpn.frozen
        return False

    def trainable_variables_by_name(self) -> Dict[str, tf.Variable]:
        """Variables que el optimizador actualiza: usadas por la variante y no congeladas"""
        return {
            name: var for name, var in self.named_variables().items()
            if self._uses(name) and not self._frozen(name)
        }

    def configure_stage(self, stage: str, k: int, training: TrainingConfig):
        """
        Política de congelación

        BASE: todo entrenable salvo (opcionalmente) la primera etapa del backbone.
        FINETUNE: backbone congelado; RPN congelada si k <= freeze_rpn_max_shots.
        """
        if stage == 'BASE':
            self.backbone.freeze(1 if training.freeze_first_stage else 0)
            self.rpn.frozen = False
        elif stage == 'FINETUNE':
            self.backbone.freeze(None)
            self.rpn.frozen = k <= training.freeze_rpn_max_shots
        else:
            self.backbone.freeze(None)
            self.rpn.frozen = True
        logger.info(
            f"Política de congelación {stage} (K={k}): backbone "
            f"{sum(s.frozen for s in self.backbone.stages)}/{len(self.backbone.stages)} etapas, "
            f"RPN {'congelada' if self.rpn.frozen else 'entrenable'}"
        )

    # ---------------------------------------------------------------- soporte

    def extract_mid(self, image) -> FeatureMap:
        return self.backbone.extract_mid(image)

    def extract_high(self, feature_map: FeatureMap) -> FeatureMap:
        return self.backbone.extract_high(feature_map)

    def encode_supports(self, episode: Episode, mode: Mode,
                        rng: Optional[np.random.Generator] = None) -> SupportContext:
        """
        Codifica la rama de soporte de un episodio

        TRAIN: un shot muestreado por clase. TEST: los K shots, integrados con
        integrate_shots (FFA) y promediados (prototipo de clase).
        """
        roster = tuple(episode.class_roster)
        if mode == Mode.TRAIN:
            if rng is None:
                raise ValidationError("encode_supports en TRAIN necesita un rng")
            shots = {c: [episode.support_crops[c][int(rng.integers(episode.k))]] for c in roster}
        else:
            shots = {c: list(episode.support_crops[c]) for c in roster}

        crops = [crop.image for c in roster for crop in shots[c]]
        mids = self.backbone.mid_batch(stack_images(crops, self.dtype))      # (sum K, h, w, d)
        pooled = pooled_high(self.backbone, mids)                          # (sum K, 2d)

        class_prototypes, per_class_maps = [], {}
        offset = 0
        for c in roster:
            count = len(shots[c])
            class_prototypes.append(tf.reduce_mean(pooled[offset:offset + count], axis=0))
            per_class_maps[c] = [FeatureMap(mids[offset + i]) for i in range(count)]
            offset += count
        context = SupportContext(roster=roster, class_prototypes=tf.stack(class_prototypes, axis=0))

        if self.variant.aggregation == 'ffa':
            per_class = []
            for c in roster:
                prototypes = [distill_prototypes(fm, self.queries[c], self.projection) for fm in per_class_maps[c]]
                if len(prototypes) == 1:
                    per_class.append(prototypes[0])
                else:
                    weights = shot_weights(self.queries[c], per_class_maps[c], self.projection,
                                           self.config.resolved_topk)
                    per_class.append(integrate_shots(prototypes, weights, self.config.shot_weight_mode))
            context.bank = build_prototype_bank(per_class, self.projection)
        elif self.variant.aggregation == 'dense':
            context.dense_supports = [(c, fm) for c in roster for fm in per_class_maps[c]]
        return context

    # ---------------------------------------------------------------- consulta

    def aggregate(self, query: FeatureMap, context: SupportContext) -> FeatureMap:
        """Mapa de consulta tras la agregación de la variante"""
        if self.variant.aggregation == 'ffa':
            return assign_prototypes(query, context.bank, self.projection)
        if self.variant.aggregation == 'dense':
            return dense_match_baseline(query, context.dense_supports, self.projection)
        return query

    def _anchors(self, feature_hw: Tuple[int, int]) -> np.ndarray:
        if feature_hw not in self._anchor_cache:
            self._anchor_cache[feature_hw] = generate_anchors(
                feature_hw, self.config.backbone.mid_stride,
                self.config.rpn.anchor_scales, self.config.rpn.anchor_ratios
            )
        return self._anchor_cache[feature_hw]

    def rpn_outputs(self, image, context: SupportContext) -> Tuple[FeatureMap, tf.Tensor, tf.Tensor]:
        """Mapa agregado y salidas de la RPN para una imagen de consulta"""
        aggregated = self.aggregate(self.extract_mid(image), context)
        logits, deltas = self.rpn(aggregated.values)
        return aggregated, logits, deltas

    def roi_features(self, feature_map: FeatureMap, boxes: np.ndarray) -> tf.Tensor:
        """RoIs (R, 4) en píxeles -> características (R, 2d)"""
        stride = self.config.backbone.mid_stride
        height, width = feature_map.height, feature_map.width
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        # índice de celda = píxel / stride - 0.5, normalizado a [0, 1] sobre (dim - 1)
        x1 = (boxes[:, 0] / stride - 0.5) / max(width - 1, 1)
        y1 = (boxes[:, 1] / stride - 0.5) / max(height - 1, 1)
        x2 = (boxes[:, 2] / stride - 0.5) / max(width - 1, 1)
        y2 = (boxes[:, 3] / stride - 0.5) / max(height - 1, 1)
        normalized = np.stack([y1, x1, y2, x2], axis=1).astype(np.float32)
        size = self.config.roi_crop_size
        crops = tf.image.crop_and_resize(
            tf.cast(feature_map.values[tf.newaxis], tf.float32), normalized,
            np.zeros(len(boxes), dtype=np.int32), (size, size)
        )
        return pooled_high(self.backbone, tf.cast(crops, self.dtype))

    def _train_query(self, query: QueryImage, context: SupportContext, rng: np.random.Generator):
        rpn_cfg = self.config.rpn
        aggregated, logits, deltas = self.rpn_outputs(query.image, context)
        anchors = self._anchors((aggregated.height, aggregated.width))
        anchor_targets = assign_anchors(anchors, query.boxes, rpn_cfg, rng)

        proposals, _ = propose(
            anchors, logits.numpy(), deltas.numpy(), query.image.shape[:2],
            rpn_cfg.pre_nms_train, rpn_cfg.post_nms_train, rpn_cfg.nms_iou
        )
        roi_targets = sample_rois(proposals, query.boxes, query.labels, rpn_cfg, rng)
        features = self.roi_features(aggregated, roi_targets.boxes)
        plan = self.sampler.plan(roi_targets.labels, context.roster, rng)

        positions = np.asarray([context.class_position(int(c)) for c in plan.prototype_class], dtype=np.int64)
        fused = self._fuse(
            tf.gather(features, plan.roi_index),
            tf.gather(context.class_prototypes, positions),
            self.fusion,
        )
        class_logits, box_deltas = self.head(fused, context.roster)

        columns = np.where(plan.positive, positions + 1, 0).astype(np.int64)
        predictions = (
            tf.gather(logits, anchor_targets.indices),
            tf.gather(deltas, anchor_targets.indices),
            class_logits,
            box_deltas,
        )
        targets = (
            anchor_targets.labels,
            anchor_targets.box_targets,
            columns,
            roi_targets.box_targets[plan.roi_index],
            plan.positive,
        )
        return predictions, targets

    def _detect_query(self, query: QueryImage, context: SupportContext,
                      eval_config: EvalConfig) -> List[Detection]:
        rpn_cfg = self.config.rpn
        aggregated, logits, deltas = self.rpn_outputs(query.image, context)
        anchors = self._anchors((aggregated.height, aggregated.width))
        height, width = query.image.shape[:2]
        proposals, _ = propose(
            anchors, logits.numpy(), deltas.numpy(), (height, width),
            rpn_cfg.pre_nms_test, rpn_cfg.post_nms_test, rpn_cfg.nms_iou
        )
        if len(proposals) == 0:
            return []
        features = self.roi_features(aggregated, proposals)

        boxes_all, scores_all, classes_all = [], [], []
        for position, class_id in enumerate(context.roster):
            prototype = tf.repeat(context.class_prototypes[position:position + 1], len(proposals), axis=0)
            class_logits, box_deltas = self.head(self._fuse(features, prototype, self.fusion), context.roster)
            scores = tf.nn.softmax(class_logits, axis=-1)[:, position + 1].numpy().astype(np.float64)
            boxes = clip_boxes(decode_boxes(proposals, box_deltas.numpy(), ROI_BOX_WEIGHTS), height, width)
            valid = (scores >= eval_config.score_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            boxes, scores = boxes[valid], scores[valid]
            keep = nms(boxes, scores, eval_config.nms_iou, eval_config.max_detections)
            boxes_all.append(boxes[keep])
            scores_all.append(scores[keep])
            classes_all.append(np.full(len(keep), class_id, dtype=np.int64))

        boxes = np.concatenate(boxes_all, axis=0)
        scores = np.concatenate(scores_all, axis=0)
        classes = np.concatenate(classes_all, axis=0)
        order = np.argsort(-scores, kind='stable')[:eval_config.max_detections]
        return [
            Detection(box=tuple(float(v) for v in boxes[i]), class_id=int(classes[i]),
                      score=float(min(scores[i], 1.0)), image_id=query.image_id)
            for i in order
        ]

    def detect(self, queries: Sequence[QueryImage], context: SupportContext,
               eval_config: Optional[EvalConfig] = None) -> List[Detection]:
        """Detecciones para imágenes de consulta con un contexto de soporte ya codificado"""
        eval_config = eval_config or EvalConfig()
        detections: List[Detection] = []
        for query in queries:
            detections.extend(self._detect_query(query, context, eval_config))
        return detections

    def forward_episode(self, episode: Episode, mode: Mode, rng: Optional[np.random.Generator] = None,
                        eval_config: Optional[EvalConfig] = None):
        """
        Ejecuta un episodio completo

        Returns:
            TRAIN: LossBreakdown (llamar dentro de un tf.GradientTape)
            TEST: lista de Detection
        """
        context = self.encode_supports(episode, mode, rng)
        if mode == Mode.TEST:
            return self.detect(episode.query_images, context, eval_config)

        parts = [self._train_query(query, context, rng) for query in episode.query_images]
        predictions = DetectorPredictions(
            rpn_logits=tf.concat([p[0][0] for p in parts], axis=0),
            rpn_deltas=tf.concat([p[0][1] for p in parts], axis=0),
            roi_class_logits=tf.concat([p[0][2] for p in parts], axis=0),
            roi_box_deltas=tf.concat([p[0][3] for p in parts], axis=0),
            meta_logits=self.meta(context.class_prototypes, context.roster),
        )
        targets = DetectionTargets(
            rpn_labels=np.concatenate([p[1][0] for p in parts]),
            rpn_box_targets=np.concatenate([p[1][1] for p in parts], axis=0),
            roi_columns=np.concatenate([p[1][2] for p in parts]),
            roi_box_targets=np.concatenate([p[1][3] for p in parts], axis=0),
            roi_positive=np.concatenate([p[1][4] for p in parts]),
            meta_columns=np.arange(len(context.roster), dtype=np.int64),
        )
        return compute_losses(predictions, targets)
