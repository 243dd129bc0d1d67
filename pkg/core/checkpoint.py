"""checkpoint.py
Persistencia de checkpoints del detector

Formato: un único zip sin compresión y con marcas de tiempo fijas, de modo
que dos ejecuciones con la misma semilla producen archivos idénticos byte a
byte.

    meta.json               etiqueta 'fpd-checkpoint', versión, etapa,
                            iteración, configuración, tabla de clases,
                            nombres de variables y número de slots del optimizador
    params/<nombre>.npy     una entrada por variable del registro del detector
    optimizer/<i>.npy       una entrada por variable del optimizador

Versiones menores distintas se leen; una versión mayor distinta se rechaza.
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import tensorflow as tf

from config.settings import RunConfig, config_from_dict
from core.detector import FewShotDetector
from utils.validators import ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_TAG = 'fpd-checkpoint'
CHECKPOINT_VERSION = '1.0'
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointData:
    """Contenido de un checkpoint leído de disco"""
    meta: Dict[str, Any]
    params: Dict[str, np.ndarray]
    optimizer: List[np.ndarray] = field(default_factory=list)

    @property
    def iteration(self) -> int:
        return int(self.meta['iteration'])

    @property
    def stage(self) -> str:
        return self.meta['stage']

    @property
    def base_classes(self) -> List[int]:
        return list(self.meta['classes']['base'])

    @property
    def novel_classes(self) -> List[int]:
        return list(self.meta['classes']['novel'])

    def run_config(self) -> RunConfig:
        return config_from_dict(self.meta['config'])


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def _write_entry(archive: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def save_checkpoint(path: Union[str, Path], detector: FewShotDetector, config: RunConfig,
                    stage: str, iteration: int, base_classes: Sequence[int],
                    novel_classes: Sequence[int] = (),
                    optimizer: Optional[tf.keras.optimizers.Optimizer] = None) -> Path:
    """
    Escribe un checkpoint

    Args:
        path: Ruta del archivo .zip
        detector: Detector cuyo registro de variables se guarda
        config: Configuración de la ejecución (se guarda completa)
        stage: 'BASE' o 'FINETUNE'
        iteration: Iteraciones completadas
        base_classes / novel_classes: Tabla de clases
        optimizer: Si se indica, se guardan también sus variables
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = detector.named_variables()
    optimizer_values = [np.asarray(v.numpy()) for v in optimizer.variables] if optimizer is not None else []

    meta = {
        'tag': CHECKPOINT_TAG,
        'version': CHECKPOINT_VERSION,
        'stage': stage,
        'iteration': int(iteration),
        'config': config.to_dict(),
        'classes': {
            'base': [int(c) for c in base_classes],
            'novel': [int(c) for c in novel_classes],
            'registered': [int(c) for c in detector.class_ids],
        },
        'variables': list(named),
        'optimizer_slots': len(optimizer_values),
    }

    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as archive:
        _write_entry(archive, 'meta.json', json.dumps(meta, sort_keys=True, indent=2).encode('utf-8'))
        for name, var in named.items():
            _write_entry(archive, f'params/{name}.npy', _npy_bytes(var.numpy()))
        for i, value in enumerate(optimizer_values):
            _write_entry(archive, f'optimizer/{i}.npy', _npy_bytes(value))

    logger.info(f"💾 Checkpoint guardado: {path} (etapa={stage}, iteración={iteration}, variables={len(named)})")
    return path


def read_checkpoint(path: Union[str, Path]) -> CheckpointData:
    """Lee y valida un checkpoint"""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Checkpoint no encontrado: {path}")
    try:
        with zipfile.ZipFile(path, 'r') as archive:
            meta = json.loads(archive.read('meta.json').decode('utf-8'))
            if meta.get('tag') != CHECKPOINT_TAG:
                raise ValidationError(f"{path} no es un checkpoint de este detector")
            major = str(meta.get('version', '')).split('.')[0]
            if major != CHECKPOINT_VERSION.split('.')[0]:
                raise ValidationError(
                    f"Versión de checkpoint incompatible: {meta.get('version')} (soportada {CHECKPOINT_VERSION})"
                )
            params = {
                name: np.load(io.BytesIO(archive.read(f'params/{name}.npy')), allow_pickle=False)
                for name in meta['variables']
            }
            optimizer = [
                np.load(io.BytesIO(archive.read(f'optimizer/{i}.npy')), allow_pickle=False)
                for i in range(int(meta.get('optimizer_slots', 0)))
            ]
    except (zipfile.BadZipFile, KeyError) as e:
        raise ValidationError(f"Checkpoint corrupto {path}: {e}")
    return CheckpointData(meta=meta, params=params, optimizer=optimizer)


def load_into(detector: FewShotDetector, data: CheckpointData):
    """Asigna los arrays del checkpoint a las variables del detector"""
    named = detector.named_variables()
    missing = sorted(set(named) - set(data.params))
    if missing:
        raise ValidationError(f"Faltan variables en el checkpoint: {', '.join(missing[:5])}")
    for name, var in named.items():
        value = data.params[name]
        if tuple(value.shape) != tuple(var.shape):
            raise ValidationError(f"Forma distinta para {name}: {value.shape} vs {tuple(var.shape)}")
        var.assign(value)


def restore_detector(data: CheckpointData, config: Optional[RunConfig] = None) -> FewShotDetector:
    """
    Reconstruye el detector de un checkpoint

    Args:
        data: Checkpoint leído
        config: Configuración a usar (por defecto la guardada); la arquitectura
                debe coincidir con la del checkpoint
    """
    config = config or data.run_config()
    registered = data.meta['classes'].get('registered', data.base_classes)
    base = [c for c in registered if c in data.base_classes]
    # La inicialización aleatoria se sobrescribe entera al cargar
    detector = FewShotDetector(config.model, base, np.random.default_rng(0))
    for class_id in registered:
        if class_id not in base:
            detector.add_class(class_id)
    load_into(detector, data)
    return detector


def restore_optimizer(optimizer: tf.keras.optimizers.Optimizer, variables: Sequence[tf.Variable],
                      data: CheckpointData):
    """Construye el optimizador sobre variables y restaura su estado"""
    if not data.optimizer:
        return
    optimizer.build(list(variables))
    slots = optimizer.variables
    if len(slots) != len(data.optimizer):
        raise ValidationError(
            f"El optimizador tiene {len(slots)} variables y el checkpoint {len(data.optimizer)}"
        )
    for slot, value in zip(slots, data.optimizer):
        slot.assign(value)
