"""heatmaps.py
Exportación de mapas de atención

- Soporte: por cada feature query, su fila de afinidad de destilación sobre
  las posiciones del mapa de soporte (rejilla h x w), ampliada por vecino más
  cercano al tamaño del recorte.
- Consulta: suma por canales del mapa de prototipos asignados
  (mapa agregado menos el mapa original), normalizada a [0, 1].

Cada mapa se guarda como PNG en escala de grises (valor x 255) y las
rejillas normalizadas sin ampliar van a un .npz junto a ellos.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import tensorflow as tf

from config.settings import RunConfig
from core.checkpoint import read_checkpoint, restore_detector
from core.data_models import Mode
from core.dataset import TEST, ImageStore, read_manifest
from core.detector import FewShotDetector, SupportContext
from core.episodes import support_episode
from core.evaluator import support_split_for
from core.ffa import assign_prototypes_with_affinity, distill_prototypes_with_affinity
from core.runtime import configure_determinism, stage_rng
from utils.validators import ValidationError

logger = logging.getLogger(__name__)


def normalize_map(values) -> np.ndarray:
    """Min-max a [0, 1]; un mapa constante se devuelve como ceros"""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if not np.isfinite(low) or not np.isfinite(high):
        raise ValidationError("El mapa contiene valores no finitos")
    if high - low <= 0.0:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Amplía una rejilla 2D por vecino más cercano"""
    resized = tf.image.resize(
        tf.convert_to_tensor(grid[..., np.newaxis], dtype=tf.float32), (height, width),
        method=tf.image.ResizeMethod.NEAREST_NEIGHBOR,
    )
    return resized.numpy()[..., 0].astype(np.float64)


def support_heatmaps(detector: FewShotDetector, crop: np.ndarray, class_id: int) -> np.ndarray:
    """
    Afinidad de destilación de cada query de la clase sobre un recorte

    Returns:
        (n, h, w) con h x w la rejilla del mapa de soporte, cada fila en [0, 1]
    """
    support = detector.extract_mid(crop)
    _, affinity = distill_prototypes_with_affinity(support, detector.queries[class_id], detector.projection)
    rows = affinity.values.numpy().reshape(-1, support.height, support.width)
    return np.stack([normalize_map(row) for row in rows], axis=0)


def assigned_prototype_heatmap(detector: FewShotDetector, image: np.ndarray,
                               context: SupportContext) -> np.ndarray:
    """Suma por canales de alpha * A' P (mapa agregado menos el original), en [0, 1]"""
    query = detector.extract_mid(image)
    aggregated, _ = assign_prototypes_with_affinity(query, context.bank, detector.projection)
    residual = tf.reduce_sum(aggregated.values - query.values, axis=-1)
    return normalize_map(residual.numpy())


def write_png(path: Union[str, Path], grid: np.ndarray) -> Path:
    """PNG de 8 bits en escala de grises a partir de un mapa en [0, 1]"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)[..., np.newaxis]
    tf.io.write_file(str(path), tf.io.encode_png(pixels))
    return path


@dataclass
class HeatmapExport:
    """Ficheros escritos por export_heatmaps"""
    output_dir: Path
    support_files: List[Path] = field(default_factory=list)
    query_files: List[Path] = field(default_factory=list)
    grids_file: Optional[Path] = None

    @property
    def files(self) -> List[Path]:
        return self.support_files + self.query_files


def export_heatmaps(config: RunConfig, checkpoint: Optional[str] = None,
                    image_ids: Optional[Sequence[int]] = None,
                    output_dir: Optional[str] = None) -> HeatmapExport:
    """
    Exporta los mapas de atención de soporte y de consulta de un checkpoint

    Args:
        config: Configuración (manifiesto, semilla, eval.heatmap_images)
        checkpoint: Checkpoint con agregación FFA
        image_ids: Imágenes de test a renderizar (por defecto las primeras
                   eval.heatmap_images del split)
        output_dir: Directorio de salida (por defecto <output_dir>/heatmaps)

    Raises:
        ValidationError: Checkpoint sin agregación FFA
    """
    checkpoint = checkpoint or config.checkpoint
    if not checkpoint:
        raise ValidationError("export_heatmaps necesita un checkpoint")
    configure_determinism(config.seed)
    data = read_checkpoint(checkpoint)
    detector = restore_detector(data)
    if detector.variant.aggregation != 'ffa':
        raise ValidationError(
            f"La variante '{detector.config.variant}' no tiene feature queries que visualizar"
        )
    detector.configure_stage('EVAL', config.k, config.training)

    manifest = read_manifest(config.manifest_path)
    support_split, k = support_split_for(data, manifest)
    classes = sorted(detector.class_ids)
    store = ImageStore(manifest)
    support_size = detector.config.backbone.support_size
    episode = support_episode(manifest, support_split, classes, k, stage_rng(config.seed, 'HEATMAP'),
                              store, support_size)
    context = detector.encode_supports(episode, Mode.TEST)

    out = Path(output_dir) if output_dir else Path(config.output_dir) / 'heatmaps'
    result = HeatmapExport(output_dir=out)
    grids: Dict[str, np.ndarray] = {}

    for class_id in classes:
        for shot, crop in enumerate(episode.support_crops[class_id]):
            maps = support_heatmaps(detector, crop.image, class_id)
            grids[f'support_c{class_id}_s{shot}'] = maps
            for query_index, grid in enumerate(maps):
                path = out / 'support' / f'class{class_id:02d}_shot{shot}_query{query_index}.png'
                result.support_files.append(
                    write_png(path, upsample_nearest(grid, support_size, support_size))
                )

    if image_ids is None:
        image_ids = manifest.split_image_ids(TEST)[:config.eval.heatmap_images]
    for image_id in image_ids:
        image = store.load(int(image_id))
        grid = assigned_prototype_heatmap(detector, image, context)
        grids[f'query_{int(image_id):05d}'] = grid
        height, width = image.shape[:2]
        path = out / 'query' / f'image{int(image_id):05d}.png'
        result.query_files.append(write_png(path, upsample_nearest(grid, height, width)))

    out.mkdir(parents=True, exist_ok=True)
    result.grids_file = out / 'grids.npz'
    np.savez(result.grids_file, **grids)
    logger.info(
        f"✅ Heatmaps exportados en {out}: {len(result.support_files)} de soporte, "
        f"{len(result.query_files)} de consulta"
    )
    return result
