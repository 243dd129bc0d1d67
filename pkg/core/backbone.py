"""backbone.py
Backbone convolucional de juguete compartido por las ramas de consulta y soporte

Las etapas medias producen mapas de d canales (entrada de FFA y de la RPN);
la etapa alta produce 2d canales (características de RoI y prototipos de
clase). Una sola instancia sirve a ambas ramas: no hay pesos duplicados.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
import tensorflow as tf

from config.settings import BackboneConfig
from core.data_models import FeatureMap, normal_variable
from utils.validators import ValidationError

logger = logging.getLogger(__name__)


class FreezableModule(tf.Module):
    """tf.Module cuyas variables se leen a través de stop_gradient si está congelado

    Congelar garantiza gradientes exactamente nulos (tape.gradient -> None)
    sin tocar la lista de variables del optimizador.
    """

    def __init__(self, name: str = None):
        super().__init__(name=name)
        self.frozen = False

    def read(self, variable: tf.Variable) -> tf.Tensor:
        return tf.stop_gradient(variable) if self.frozen else variable


class ConvStage(FreezableModule):
    """Convolución 3x3 con stride, padding SAME y ReLU"""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator, dtype=tf.float32, name: str = None):
        super().__init__(name=name)
        dtype = tf.as_dtype(dtype)
        self.stride = stride
        self.out_channels = out_channels
        fan_in = 9 * in_channels
        self.kernel = normal_variable(rng, (3, 3, in_channels, out_channels), np.sqrt(2.0 / fan_in), dtype)
        self.bias = tf.Variable(tf.zeros((out_channels,), dtype=dtype))

    def __call__(self, x: tf.Tensor) -> tf.Tensor:
        y = tf.nn.conv2d(x, self.read(self.kernel), strides=self.stride, padding='SAME')
        return tf.nn.relu(y + self.read(self.bias))


class Backbone(tf.Module):
    """
    Backbone siamés dividido en etapas medias y etapa alta

    Args:
        config: BackboneConfig (anchuras y strides de cada etapa)
        rng: Generador con semilla para la inicialización
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=tf.float32,
                 name: str = 'backbone'):
        super().__init__(name=name)
        self.config = config
        self.dtype = tf.as_dtype(dtype)
        channels = 3
        self.mid_stages: List[ConvStage] = []
        for i, (width, stride) in enumerate(config.mid_stage_spec):
            self.mid_stages.append(ConvStage(channels, width, stride, rng, dtype, name=f'mid{i}'))
            channels = width
        self.high_stages: List[ConvStage] = []
        for i, (width, stride) in enumerate(config.high_stage_spec):
            self.high_stages.append(ConvStage(channels, width, stride, rng, dtype, name=f'high{i}'))
            channels = width

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def stages(self) -> List[ConvStage]:
        return self.mid_stages + self.high_stages

    def freeze(self, first_n: int = None):
        """Congela las primeras first_n etapas (todas si es None)"""
        stages = self.stages
        count = len(stages) if first_n is None else first_n
        for i, stage in enumerate(stages):
            stage.frozen = i < count
        logger.debug(f"Backbone: {count}/{len(stages)} etapas congeladas")

    def named_variables(self) -> Dict[str, tf.Variable]:
        named = {}
        for stage in self.stages:
            named[f'{stage.name}/kernel'] = stage.kernel
            named[f'{stage.name}/bias'] = stage.bias
        return named

    def _check_image(self, images: tf.Tensor):
        size = tuple(int(v) for v in images.shape[1:3])
        allowed = {tuple(self.config.input_size), (self.config.support_size, self.config.support_size)}
        if size not in allowed or images.shape[-1] != 3:
            raise ValidationError(
                f"Imagen de tamaño {size}x{images.shape[-1]} no coincide con input_size "
                f"{tuple(self.config.input_size)} ni con support_size {self.config.support_size}"
            )

    def mid_batch(self, images: tf.Tensor) -> tf.Tensor:
        """(B, H, W, 3) -> (B, H/s, W/s, d)"""
        images = tf.cast(tf.convert_to_tensor(images), self.dtype)
        if images.shape.rank == 3:
            images = images[tf.newaxis]
        self._check_image(images)
        x = images
        for stage in self.mid_stages:
            x = stage(x)
        return x

    def high_batch(self, features: tf.Tensor) -> tf.Tensor:
        """(B, h, w, d) -> (B, h', w', 2d)"""
        x = tf.convert_to_tensor(features)
        for stage in self.high_stages:
            x = stage(x)
        return x

    def extract_mid(self, image) -> FeatureMap:
        """Mapa medio de una imagen (consulta o soporte)"""
        return FeatureMap(self.mid_batch(image)[0])

    def extract_high(self, feature_map: FeatureMap) -> FeatureMap:
        """Mapa alto (2d canales) a partir de un mapa medio"""
        if feature_map.channels != self.d:
            raise ValidationError(f"extract_high espera {self.d} canales, recibido {feature_map.channels}")
        return FeatureMap(self.high_batch(feature_map.values[tf.newaxis])[0])

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        return self.config.mid_output_hw(height, width)


def pooled_high(backbone: Backbone, mid_maps: tf.Tensor) -> tf.Tensor:
    """Etapa alta seguida de media espacial: (B, h, w, d) -> (B, 2d)"""
    return tf.reduce_mean(backbone.high_batch(mid_maps), axis=(1, 2))


def stack_images(images: Sequence[np.ndarray], dtype=tf.float32) -> tf.Tensor:
    return tf.cast(tf.stack([tf.convert_to_tensor(img) for img in images], axis=0), dtype)
