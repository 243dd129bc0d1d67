"""evaluator.py
Evaluación AP50 sobre el split de test

- AP por clase con interpolación de todos los puntos (convención VOC2010+)
- mAP sobre clases novel, base y todas; una clase sin cajas verdaderas en
  el split no entra en ninguna media (aviso en el log y skipped_classes)
- El soporte de cada clase se codifica una sola vez y se reutiliza para todas
  las imágenes de test (con FFA el banco de prototipos se destila e integra
  sobre los K shots antes de la primera consulta)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from config.settings import RunConfig
from core.checkpoint import CheckpointData, read_checkpoint, restore_detector
from core.data_models import Detection, Mode
from core.dataset import BASE_TRAIN, TEST, DatasetManifest, ImageStore, finetune_split_name, read_manifest
from core.episodes import query_image, support_episode
from core.rpn import box_iou
from core.runtime import configure_determinism, stage_rng
from utils.validators import ValidationError

logger = logging.getLogger(__name__)


# ==============================================================================
# MÉTRICA
# ==============================================================================

def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """
    Área bajo la curva precisión-recall con precisión interpolada

    La precisión se hace monótona de derecha a izquierda y se integra sobre
    los puntos donde cambia el recall.
    """
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def match_detections(detections: Sequence[Detection], ground_truth: Mapping[int, np.ndarray],
                     iou_threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Marca cada detección (de una sola clase) como TP o FP

    Orden por score descendente (estable); cada caja verdadera solo se
    empareja una vez, con la detección de mayor score que la supere en IoU.

    Args:
        detections: Detecciones de una clase
        ground_truth: image_id -> cajas verdaderas (G, 4) de esa clase
        iou_threshold: IoU mínima para un acierto

    Returns:
        (tp, fp, número de cajas verdaderas)
    """
    num_gt = int(sum(len(boxes) for boxes in ground_truth.values()))
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in ground_truth.items()}
    tp = np.zeros(len(order), dtype=np.float64)
    fp = np.zeros(len(order), dtype=np.float64)

    for rank, index in enumerate(order):
        det = detections[index]
        gt = ground_truth.get(det.image_id)
        if gt is None or len(gt) == 0:
            fp[rank] = 1.0
            continue
        overlaps = box_iou(np.asarray([det.box], dtype=np.float64), gt)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not used[det.image_id][best]:
            used[det.image_id][best] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    return tp, fp, num_gt


def class_average_precision(detections: Sequence[Detection], ground_truth: Mapping[int, np.ndarray],
                            iou_threshold: float = 0.5) -> float:
    """AP de una clase; 0.0 si no hay cajas verdaderas o no hay detecciones"""
    tp, fp, num_gt = match_detections(detections, ground_truth, iou_threshold)
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


# ==============================================================================
# INFORME
# ==============================================================================

@dataclass
class EvaluationReport:
    """Resultado de una evaluación"""
    per_class: Dict[int, float]
    base_classes: List[int]
    novel_classes: List[int]
    k: int
    checkpoint: str = ''
    num_images: int = 0
    num_detections: int = 0
    class_names: Dict[int, str] = field(default_factory=dict)
    skipped_classes: List[int] = field(default_factory=list)

    @property
    def novel_map(self) -> Optional[float]:
        return _mean([self.per_class[c] for c in self.novel_classes if c in self.per_class])

    @property
    def base_map(self) -> Optional[float]:
        return _mean([self.per_class[c] for c in self.base_classes if c in self.per_class])

    @property
    def all_map(self) -> Optional[float]:
        return _mean(list(self.per_class.values()))

    def to_dict(self) -> Dict:
        return {
            'ap50': {str(c): ap for c, ap in sorted(self.per_class.items())},
            'class_names': {str(c): name for c, name in sorted(self.class_names.items())},
            'base_classes': self.base_classes,
            'novel_classes': self.novel_classes,
            'map50_novel': self.novel_map,
            'map50_base': self.base_map,
            'map50_all': self.all_map,
            'k': self.k,
            'checkpoint': self.checkpoint,
            'num_images': self.num_images,
            'num_detections': self.num_detections,
            'skipped_classes': self.skipped_classes,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n', encoding='utf-8')
        return path

    def table(self) -> str:
        rows = []
        for class_id, ap in sorted(self.per_class.items()):
            role = 'novel' if class_id in self.novel_classes else 'base'
            rows.append([class_id, self.class_names.get(class_id, ''), role, f"{ap:.4f}"])
        for label, value in (('mAP novel', self.novel_map), ('mAP base', self.base_map), ('mAP all', self.all_map)):
            rows.append(['', label, '', '-' if value is None else f"{value:.4f}"])
        for class_id in self.skipped_classes:
            rows.append([class_id, self.class_names.get(class_id, ''), 'sin GT', '-'])
        return tabulate(rows, headers=['id', 'clase', 'rol', 'AP50'], tablefmt='simple')


def evaluate_detections(detections: Sequence[Detection],
                        ground_truth: Mapping[int, Mapping[int, np.ndarray]],
                        classes: Sequence[int], iou_threshold: float = 0.5) -> Dict[int, float]:
    """
    AP50 por clase

    Args:
        detections: Detecciones de todas las imágenes
        ground_truth: class_id -> (image_id -> cajas)
        classes: Clases a puntuar

    Las clases sin cajas verdaderas no aparecen en el resultado, así que
    no entran en las medias de mAP.
    """
    by_class: Dict[int, List[Detection]] = {int(c): [] for c in classes}
    for det in detections:
        if det.class_id in by_class:
            by_class[det.class_id].append(det)
    per_class = {}
    for c in sorted(by_class):
        per_image = ground_truth.get(c, {})
        if sum(len(boxes) for boxes in per_image.values()) == 0:
            logger.warning(f"⚠️ La clase {c} no tiene cajas verdaderas: se excluye del mAP")
            continue
        per_class[c] = class_average_precision(by_class[c], per_image, iou_threshold)
    return per_class


def ground_truth_by_class(manifest: DatasetManifest, split: str,
                          classes: Sequence[int]) -> Dict[int, Dict[int, np.ndarray]]:
    """class_id -> image_id -> cajas (G, 4), con todas las imágenes del split presentes"""
    image_ids = manifest.split_image_ids(split)
    collected: Dict[int, Dict[int, List]] = {int(c): {i: [] for i in image_ids} for c in classes}
    for image, ann in manifest.split_annotations(split):
        if ann.class_id in collected:
            collected[ann.class_id][image.id].append(ann.box)
    return {
        c: {i: np.asarray(boxes, dtype=np.float64).reshape(-1, 4) for i, boxes in per_image.items()}
        for c, per_image in collected.items()
    }


# ==============================================================================
# EVALUACIÓN DE UN CHECKPOINT
# ==============================================================================

def support_split_for(data: CheckpointData, manifest: DatasetManifest) -> Tuple[str, int]:
    """Split de soporte y K con los que se evalúa un checkpoint"""
    k = int(data.meta['config'].get('k', 1))
    split = finetune_split_name(k) if data.stage == 'FINETUNE' else BASE_TRAIN
    if not manifest.has_split(split):
        raise ValidationError(f"El split de soporte '{split}' no existe en el manifiesto")
    return split, k


def evaluate(config: RunConfig, checkpoint: Optional[str] = None,
             output_path: Optional[str] = None) -> EvaluationReport:
    """
    Evalúa un checkpoint sobre el split de test

    El soporte sale del split finetune-K (checkpoint de fine-tuning) o de
    base-train (checkpoint base), con K recortes por clase.

    Raises:
        ValidationError: Split de test vacío o inexistente
    """
    checkpoint = checkpoint or config.checkpoint
    if not checkpoint:
        raise ValidationError("evaluate necesita un checkpoint")
    configure_determinism(config.seed)
    data = read_checkpoint(checkpoint)
    # La arquitectura sale siempre de la configuración guardada
    detector = restore_detector(data)
    detector.configure_stage('EVAL', config.k, config.training)

    manifest = read_manifest(config.manifest_path)
    if not manifest.has_split(TEST) or not manifest.split_image_ids(TEST):
        raise ValidationError(f"El split '{TEST}' está vacío o no existe en {config.manifest_path}")

    support_split, k = support_split_for(data, manifest)
    classes = sorted(detector.class_ids)
    store = ImageStore(manifest)
    episode = support_episode(manifest, support_split, classes, k, stage_rng(config.seed, 'EVAL'),
                              store, detector.config.backbone.support_size)
    context = detector.encode_supports(episode, Mode.TEST)
    logger.info(f"Soporte codificado una vez: {len(classes)} clases x {k} shots desde '{support_split}'")

    detections: List[Detection] = []
    test_ids = manifest.split_image_ids(TEST)
    for image_id in test_ids:
        query = query_image(manifest, TEST, image_id, classes, store)
        detections.extend(detector.detect([query], context, config.eval))

    ground_truth = ground_truth_by_class(manifest, TEST, classes)
    per_class = evaluate_detections(detections, ground_truth, classes, config.eval.ap_iou)
    report = EvaluationReport(
        per_class=per_class,
        base_classes=[c for c in classes if c in data.base_classes],
        novel_classes=[c for c in classes if c not in data.base_classes],
        k=k,
        checkpoint=str(checkpoint),
        num_images=len(test_ids),
        num_detections=len(detections),
        class_names={c: manifest.class_name(c) for c in classes},
        skipped_classes=[c for c in classes if c not in per_class],
    )
    path = report.write(output_path or Path(config.output_dir) / 'eval_report.json')
    logger.info(f"✅ Evaluación completada ({len(test_ids)} imágenes): informe en {path}")
    logger.info("\n" + report.table())
    return report
