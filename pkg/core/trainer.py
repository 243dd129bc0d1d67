"""trainer.py
Entrenamiento en dos etapas

- train_base: entrena todos los parámetros sobre las clases base
  (opcionalmente con la primera etapa del backbone congelada)
- finetune_novel: transfiere feature queries a las clases novel, congela el
  backbone (y la RPN si K <= freeze_rpn_max_shots) y ajusta sobre el split
  K-shot equilibrado de clases base y novel

Cada iteración registra sus pérdidas en metrics.jsonl. Una pérdida no finita
aborta con un volcado de diagnóstico (nan_dump.json) y NumericalError.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from config.settings import RunConfig
from core.checkpoint import (
    CheckpointData, read_checkpoint, restore_detector, restore_optimizer, save_checkpoint
)
from core.data_models import Episode, Mode
from core.dataset import (
    BASE_TRAIN, DatasetManifest, ImageStore, finetune_split_name, make_kshot_split, read_manifest
)
from core.detector import FewShotDetector
from core.episodes import pick_roster, sample_episode
from core.query_transfer import compatibility, merge_reports, select_and_duplicate, selected_rows
from core.runtime import STAGE_CODES, configure_determinism, stage_rng
from utils.logger import LoggerContext, log_iteration
from utils.metrics_log import MetricsWriter, truncate_metrics
from utils.validators import NumericalError, ValidationError

logger = logging.getLogger(__name__)

LOG_EVERY = 10


@dataclass
class TrainingResult:
    """Resumen de una etapa de entrenamiento"""
    stage: str
    checkpoint_path: Path
    metrics_path: Path
    iterations: int
    first_total: Optional[float] = None
    last_total: Optional[float] = None
    transfer_rows: Dict[int, List[int]] = field(default_factory=dict)


def build_optimizer(learning_rate: float, config: RunConfig) -> tf.keras.optimizers.Optimizer:
    """SGD con momentum, weight decay y decaimiento escalonado opcional"""
    training = config.training
    schedule = learning_rate
    if training.milestones:
        values = [learning_rate * (training.gamma ** i) for i in range(len(training.milestones) + 1)]
        schedule = tf.keras.optimizers.schedules.PiecewiseConstantDecay(list(training.milestones), values)
    return tf.keras.optimizers.SGD(
        learning_rate=schedule, momentum=training.momentum,
        weight_decay=training.weight_decay or None,
    )


def _stage_dir(config: RunConfig, stage: str) -> Path:
    name = 'base' if stage == 'BASE' else finetune_split_name(config.k)
    return Path(config.output_dir) / name


def _dump_nan(path: Path, diagnostics: Dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(diagnostics, sort_keys=True, indent=2) + '\n', encoding='utf-8')


class Trainer:
    """
    Bucle de entrenamiento de una etapa

    Args:
        config: Configuración de la ejecución
        stage: 'BASE' o 'FINETUNE'
        detector: Detector ya construido (y con la política de congelación aplicada)
        manifest / store: Datos
        split: Split del que se muestrean los episodios
        classes: Clases que pueden formar el roster
        learning_rate: Learning rate inicial de la etapa
    """

    def __init__(self, config: RunConfig, stage: str, detector: FewShotDetector,
                 manifest: DatasetManifest, store: ImageStore, split: str,
                 classes: Sequence[int], learning_rate: float, episode_k: int,
                 allow_overlap: bool = False):
        self.config = config
        self.stage = stage
        self.detector = detector
        self.manifest = manifest
        self.store = store
        self.split = split
        self.classes = sorted(int(c) for c in classes)
        self.episode_k = episode_k
        self.allow_overlap = allow_overlap
        self.output_dir = _stage_dir(config, stage)
        self.metrics_path = self.output_dir / 'metrics.jsonl'
        self.trainable = detector.trainable_variables_by_name()
        self.optimizer = build_optimizer(learning_rate, config)
        logger.info(
            f"Trainer {stage}: {len(self.trainable)} variables entrenables "
            f"({sum(int(np.prod(v.shape)) for v in self.trainable.values()):,} parámetros)"
        )

    def sample(self, iteration: int) -> Tuple[Episode, np.random.Generator]:
        rng = stage_rng(self.config.seed, self.stage, iteration)
        roster = pick_roster(self.classes, self.config.training.classes_per_episode, rng)
        return sample_episode(
            self.manifest, self.split, roster, self.episode_k,
            self.config.training.queries_per_episode, rng, self.store,
            self.config.model.backbone.support_size, Mode.TRAIN, self.allow_overlap,
        ), rng

    def step(self, iteration: int) -> Dict[str, float]:
        """Una iteración: episodio, pérdidas, gradientes y actualización"""
        episode, rng = self.sample(iteration)
        variables = list(self.trainable.values())
        with tf.GradientTape() as tape:
            losses = self.detector.forward_episode(episode, Mode.TRAIN, rng)
        values = losses.as_floats()

        if not all(np.isfinite(v) for v in values.values()):
            diagnostics = {
                'stage': self.stage,
                'iteration': iteration + 1,
                'episode_seed': [int(self.config.seed), STAGE_CODES[self.stage], iteration],
                'roster': list(episode.class_roster),
                'query_image_ids': list(episode.query_image_ids),
                'support_image_ids': list(episode.support_image_ids),
                'losses': {k: (v if np.isfinite(v) else str(v)) for k, v in values.items()},
            }
            _dump_nan(Path(self.config.output_dir) / 'nan_dump.json', diagnostics)
            raise NumericalError(f"Pérdida no finita en la iteración {iteration + 1} ({self.stage})", diagnostics)

        gradients = tape.gradient(losses.total, variables)
        gradients = [
            tf.zeros_like(var) if grad is None else tf.convert_to_tensor(grad)
            for grad, var in zip(gradients, variables)
        ]
        values['lr'] = float(self.optimizer.learning_rate)
        self.optimizer.apply_gradients(zip(gradients, variables))
        return values

    def checkpoint(self, path: Path, iteration: int, base_classes: Sequence[int],
                   novel_classes: Sequence[int]) -> Path:
        return save_checkpoint(path, self.detector, self.config, self.stage, iteration,
                               base_classes, novel_classes, self.optimizer)

    def run(self, iterations: int, base_classes: Sequence[int], novel_classes: Sequence[int] = (),
            start_iteration: int = 0) -> TrainingResult:
        """Ejecuta las iteraciones [start_iteration, iterations)"""
        if start_iteration > 0:
            truncate_metrics(self.metrics_path, start_iteration)
        first_total, last_total = None, None
        interval = self.config.training.checkpoint_interval

        with MetricsWriter(self.metrics_path, append=start_iteration > 0) as writer:
            for iteration in range(start_iteration, iterations):
                with LoggerContext(logger, stage=self.stage, iteration=iteration + 1,
                                   variant=self.config.model.variant):
                    values = self.step(iteration)
                writer.write({'iteration': iteration + 1, 'stage': self.stage, **values})
                first_total = values['total'] if first_total is None else first_total
                last_total = values['total']
                if (iteration + 1) % LOG_EVERY == 0 or iteration == start_iteration:
                    log_iteration(logger, self.stage, iteration + 1,
                                  {k: v for k, v in values.items() if k != 'lr'})
                if (iteration + 1) % interval == 0 and iteration + 1 < iterations:
                    self.checkpoint(self.output_dir / 'checkpoints' / f'iter_{iteration + 1:06d}.zip',
                                    iteration + 1, base_classes, novel_classes)

        final = self.checkpoint(self.output_dir / 'final.zip', iterations, base_classes, novel_classes)
        logger.info(f"✅ Etapa {self.stage} completada: {iterations} iteraciones, checkpoint {final}")
        return TrainingResult(self.stage, final, self.metrics_path, iterations, first_total, last_total)


# ==============================================================================
# ETAPA BASE
# ==============================================================================

def _load_manifest(config: RunConfig) -> DatasetManifest:
    manifest = read_manifest(config.manifest_path)
    if not manifest.has_split(BASE_TRAIN):
        raise ValidationError(f"El manifiesto {config.manifest_path} no tiene split '{BASE_TRAIN}'")
    return manifest


def train_base(config: RunConfig, resume_from: Optional[str] = None) -> TrainingResult:
    """
    Entrenamiento base sobre el split base-train

    Args:
        config: Configuración (stage BASE)
        resume_from: Checkpoint intermedio desde el que reanudar
    """
    config.check()
    configure_determinism(config.seed)
    manifest = _load_manifest(config)
    base_classes = manifest.base_class_ids
    store = ImageStore(manifest)

    start = 0
    data: Optional[CheckpointData] = None
    if resume_from:
        data = read_checkpoint(resume_from)
        if data.stage != 'BASE':
            raise ValidationError(f"{resume_from} no es un checkpoint de la etapa base")
        detector = restore_detector(data, config)
        start = data.iteration
        logger.info(f"Reanudando entrenamiento base desde la iteración {start}")
    else:
        detector = FewShotDetector(config.model, base_classes, stage_rng(config.seed, 'INIT'))
    detector.configure_stage('BASE', config.k, config.training)

    trainer = Trainer(config, 'BASE', detector, manifest, store, BASE_TRAIN, base_classes,
                      config.training.learning_rate, episode_k=1)
    if data is not None:
        restore_optimizer(trainer.optimizer, list(trainer.trainable.values()), data)
    return trainer.run(config.training.base_iterations, base_classes, (), start_iteration=start)


# ==============================================================================
# FINE-TUNING
# ==============================================================================

def transfer_novel_queries(detector: FewShotDetector, shots_by_class: Dict[int, Sequence[np.ndarray]],
                           base_classes: Sequence[int], topk: Optional[int] = None) -> Dict[int, List[int]]:
    """
    Inicializa las feature queries de cada clase novel

    Para cada clase: compatibilidad de las queries base con cada shot,
    suma de pesos entre shots y duplicado de las n filas más compatibles.

    Returns:
        Filas (del apilado de queries base) copiadas para cada clase novel
    """
    base_sets = [detector.queries[c] for c in sorted(base_classes)]
    n = detector.config.n_queries
    rows: Dict[int, List[int]] = {}
    for class_id in sorted(shots_by_class):
        reports = [
            compatibility(base_sets, detector.extract_mid(shot), detector.projection, topk)
            for shot in shots_by_class[class_id]
        ]
        merged = merge_reports(reports)
        rows[class_id] = selected_rows(merged, n).tolist()
        detector.add_class(class_id, select_and_duplicate(merged, base_sets, n, class_id))
    return rows


def _kshot_shots(manifest: DatasetManifest, split: str, classes: Sequence[int], store: ImageStore,
                 support_size: int) -> Dict[int, List[np.ndarray]]:
    shots: Dict[int, List[np.ndarray]] = {int(c): [] for c in classes}
    for image, ann in manifest.split_annotations(split):
        if ann.class_id in shots:
            shots[ann.class_id].append(store.crop(image.id, ann.box, support_size))
    return shots


def finetune_novel(config: RunConfig, base_checkpoint: Optional[str] = None) -> TrainingResult:
    """
    Fine-tuning sobre el split K-shot equilibrado

    Raises:
        ValidationError: Checkpoint base inválido o clases novel ausentes del split
    """
    base_checkpoint = base_checkpoint or config.base_checkpoint
    if not base_checkpoint:
        raise ValidationError("El fine-tuning necesita un checkpoint base")
    config.base_checkpoint = base_checkpoint
    config.stage = 'FINETUNE'
    config.check()
    configure_determinism(config.seed)

    data = read_checkpoint(base_checkpoint)
    if data.stage != 'BASE':
        raise ValidationError(f"{base_checkpoint} no es un checkpoint de la etapa base")

    manifest = read_manifest(config.manifest_path)
    split = finetune_split_name(config.k)
    if not manifest.has_split(split):
        manifest = make_kshot_split(manifest, config.k, manifest.novel_class_ids, config.seed)
        manifest.write(Path(config.manifest_path))
        logger.info(f"Split {split} creado y guardado en {config.manifest_path}")
    counts = manifest.annotation_count(split)
    missing = [c for c in manifest.novel_class_ids if counts.get(c, 0) == 0]
    if missing:
        raise ValidationError(f"Clases novel sin anotaciones en {split}: {missing}")

    store = ImageStore(manifest)
    detector = restore_detector(data, config)
    base_classes = data.base_classes
    novel_classes = [c for c in manifest.novel_class_ids if c not in detector.queries]

    shots = _kshot_shots(manifest, split, novel_classes, store, config.model.backbone.support_size)
    rows = transfer_novel_queries(detector, shots, base_classes, config.model.resolved_topk)
    for class_id, copied in rows.items():
        logger.info(f"Clase novel {class_id}: queries inicializadas desde filas base {copied}")

    detector.configure_stage('FINETUNE', config.k, config.training)
    trainer = Trainer(config, 'FINETUNE', detector, manifest, store, split,
                      base_classes + novel_classes, config.training.finetune_learning_rate,
                      episode_k=config.k, allow_overlap=True)
    result = trainer.run(config.training.finetune_iterations, base_classes, novel_classes)
    result.transfer_rows = rows
    return result
