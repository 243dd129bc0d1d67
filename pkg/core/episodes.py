"""episodes.py
Muestreo de episodios a partir de un split del manifiesto

Un episodio reúne imágenes de consulta y K recortes de soporte por clase del
roster. En TRAIN los recortes nunca salen de las imágenes de consulta del
mismo episodio.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.data_models import Episode, Mode, QueryImage, SupportCrop
from core.dataset import Annotation, DatasetManifest, ImageStore
from utils.validators import ValidationError, Validators

logger = logging.getLogger(__name__)


def _instances_by_class(manifest: DatasetManifest, split: str,
                        classes: Sequence[int]) -> Dict[int, List[Tuple[int, Annotation]]]:
    by_class: Dict[int, List[Tuple[int, Annotation]]] = {c: [] for c in classes}
    for image, ann in manifest.split_annotations(split):
        if ann.class_id in by_class:
            by_class[ann.class_id].append((image.id, ann))
    for class_id, instances in by_class.items():
        if not instances:
            raise ValidationError(f"La clase {class_id} no tiene instancias en el split '{split}'")
    return by_class


def query_image(manifest: DatasetManifest, split: str, image_id: int, classes: Sequence[int],
                store: ImageStore) -> QueryImage:
    """Imagen de consulta con la verdad terreno del split filtrada al roster"""
    roster = set(classes)
    annotations = [
        ann for image, ann in manifest.split_annotations(split)
        if image.id == image_id and ann.class_id in roster
    ]
    boxes = np.asarray([ann.box for ann in annotations], dtype=np.float64).reshape(-1, 4)
    return QueryImage(image_id, store.load(image_id), boxes, tuple(ann.class_id for ann in annotations))


def support_crops(by_class: Dict[int, List[Tuple[int, Annotation]]], k: int, rng: np.random.Generator,
                  store: ImageStore, support_size: int,
                  excluded_images: Sequence[int] = ()) -> Dict[int, Tuple[SupportCrop, ...]]:
    """K recortes por clase (con reemplazo si hay menos de K instancias disponibles)"""
    excluded = set(excluded_images)
    crops: Dict[int, Tuple[SupportCrop, ...]] = {}
    for class_id, instances in by_class.items():
        pool = [item for item in instances if item[0] not in excluded]
        if not pool:
            raise ValidationError(f"La clase {class_id} no tiene instancias de soporte fuera de las consultas")
        chosen = rng.choice(len(pool), size=k, replace=len(pool) < k)
        crops[class_id] = tuple(
            SupportCrop(store.crop(pool[i][0], pool[i][1].box, support_size), pool[i][0], class_id)
            for i in chosen.tolist()
        )
    return crops


def sample_episode(manifest: DatasetManifest, split: str, classes: Sequence[int], k: int,
                   queries_per_episode: int, rng: np.random.Generator, store: ImageStore,
                   support_size: int, mode: Mode = Mode.TRAIN, allow_overlap: bool = False) -> Episode:
    """
    Muestrea un episodio

    Las consultas se eligen en orden aleatorio y solo se aceptan si todas las
    clases del roster conservan alguna instancia fuera de ellas (TRAIN).

    Args:
        allow_overlap: Si ninguna consulta cumple esa condición (p. ej. K=1 en
                       fine-tuning), permite usar las consultas como fuente de
                       soporte en lugar de fallar

    Raises:
        ValidationError: Clase del roster ausente del split o sin consultas válidas
    """
    classes = tuple(int(c) for c in classes)
    k = Validators.validate_positive_int(k, 'K')
    queries_per_episode = Validators.validate_positive_int(queries_per_episode, 'queries_per_episode')
    by_class = _instances_by_class(manifest, split, classes)

    candidates = sorted({image_id for instances in by_class.values() for image_id, _ in instances})
    order = rng.permutation(len(candidates))
    chosen: List[int] = []
    for index in order.tolist():
        if len(chosen) == queries_per_episode:
            break
        candidate = candidates[index]
        if mode == Mode.TRAIN:
            tentative = set(chosen) | {candidate}
            if not all(any(image_id not in tentative for image_id, _ in by_class[c]) for c in classes):
                continue
        chosen.append(candidate)

    excluded: Tuple[int, ...] = tuple(chosen) if mode == Mode.TRAIN else ()
    if not chosen:
        if not allow_overlap:
            raise ValidationError(
                f"Ninguna imagen del split '{split}' deja instancias de soporte para todas las clases {classes}"
            )
        chosen = [candidates[i] for i in order[:queries_per_episode].tolist()]
        excluded = ()
        logger.warning(f"⚠️ Split '{split}': consultas y soporte comparten imágenes {chosen}")

    queries = tuple(query_image(manifest, split, image_id, classes, store) for image_id in chosen)
    crops = support_crops(by_class, k, rng, store, support_size, excluded)
    return Episode(query_images=queries, support_crops=crops, class_roster=classes)


def support_episode(manifest: DatasetManifest, split: str, classes: Sequence[int], k: int,
                    rng: np.random.Generator, store: ImageStore, support_size: int) -> Episode:
    """Episodio sin consultas con K recortes por clase (soporte de evaluación)"""
    by_class = _instances_by_class(manifest, split, tuple(int(c) for c in classes))
    crops = support_crops(by_class, k, rng, store, support_size)
    return Episode(query_images=(), support_crops=crops, class_roster=tuple(int(c) for c in classes))


def pick_roster(classes: Sequence[int], classes_per_episode: Optional[int],
                rng: np.random.Generator) -> Tuple[int, ...]:
    """Roster del episodio: todas las clases o un subconjunto aleatorio ordenado"""
    classes = sorted(int(c) for c in classes)
    if classes_per_episode is None or classes_per_episode >= len(classes):
        return tuple(classes)
    picked = rng.choice(len(classes), size=classes_per_episode, replace=False)
    return tuple(sorted(classes[i] for i in picked.tolist()))
