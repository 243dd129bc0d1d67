"""runtime.py
Determinismo de ejecución y flujos aleatorios derivados

Todas las ejecuciones son reproducibles bit a bit con la misma semilla:
semillas globales fijadas, kernels deterministas y un solo hilo. Cada
iteración obtiene su propio np.random.Generator derivado de
(semilla, etapa, iteración), de modo que reanudar desde un checkpoint
reproduce exactamente la misma secuencia de episodios.
"""

import logging

import numpy as np
import tensorflow as tf

logger = logging.getLogger(__name__)

STAGE_CODES = {'DATA': 0, 'BASE': 1, 'FINETUNE': 2, 'EVAL': 3, 'INIT': 4, 'HEATMAP': 5}

_configured = False


def configure_determinism(seed: int):
    """Fija semillas globales, activa kernels deterministas y limita a un hilo"""
    global _configured
    tf.keras.utils.set_random_seed(seed)
    tf.config.experimental.enable_op_determinism()
    if not _configured:
        # Los pools de hilos solo se pueden fijar antes de la primera operación
        try:
            tf.config.threading.set_intra_op_parallelism_threads(1)
            tf.config.threading.set_inter_op_parallelism_threads(1)
        except RuntimeError:
            logger.warning("⚠️ TensorFlow ya inicializado: no se pudo fijar un solo hilo")
        _configured = True
    logger.debug(f"Determinismo configurado (seed={seed})")


def stage_rng(seed: int, stage: str, iteration: int = 0) -> np.random.Generator:
    """Generador independiente para (semilla, etapa, iteración)"""
    if stage not in STAGE_CODES:
        raise ValueError(f"Etapa desconocida: {stage}")
    return np.random.default_rng([int(seed), STAGE_CODES[stage], int(iteration)])
