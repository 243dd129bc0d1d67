"""fusion.py
Fusión de alto nivel entre características de RoI y prototipos de clase

- nlf_fuse: fusión no lineal por caminos (producto, resta, concatenación
  y un camino exclusivo para la RoI) seguida de una capa afín F_agg
- multiply_fuse_batch: fusión por producto elemento a elemento (línea base)
"""

import logging
from typing import Callable, Dict

import numpy as np
import tensorflow as tf

from core.data_models import ClassPrototype, RoIFeature, normal_variable
from utils.validators import ValidationError, check_shapes

logger = logging.getLogger(__name__)

FUSION_KINDS = ('multiply', 'nlf')


class AffineLayer(tf.Module):
    """Capa afín x W + b, opcionalmente rectificada con max(0, .)"""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 dtype=tf.float32, rectify: bool = True, name: str = None,
                 init_scale: float = None):
        super().__init__(name=name)
        dtype = tf.as_dtype(dtype)
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.rectify = rectify
        scale = 1.0 / np.sqrt(fan_in) if init_scale is None else init_scale
        self.kernel = normal_variable(rng, (fan_in, fan_out), scale, dtype)
        self.bias = tf.Variable(tf.zeros((fan_out,), dtype=dtype))

    def __call__(self, x: tf.Tensor) -> tf.Tensor:
        y = tf.matmul(x, self.kernel) + self.bias
        return tf.nn.relu(y) if self.rectify else y


class FusionParams(tf.Module):
    """
    Parámetros de la fusión no lineal

    F1, F2: 2d -> 2d (rectificadas); F3: 4d -> 2d (rectificada);
    F_agg: 8d -> 2d (afín pura). La salida alimenta la cabeza de detección.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=tf.float32,
                 name: str = 'fusion_params'):
        super().__init__(name=name)
        self.width = width
        self.F1 = AffineLayer(width, width, rng, dtype, rectify=True, name='F1')
        self.F2 = AffineLayer(width, width, rng, dtype, rectify=True, name='F2')
        self.F3 = AffineLayer(2 * width, width, rng, dtype, rectify=True, name='F3')
        self.F_agg = AffineLayer(4 * width, width, rng, dtype, rectify=False, name='F_agg')

    @property
    def output_width(self) -> int:
        return self.F_agg.fan_out

    def named_variables(self) -> Dict[str, tf.Variable]:
        named = {}
        for layer_name in ('F1', 'F2', 'F3', 'F_agg'):
            layer = getattr(self, layer_name)
            named[f'{layer_name}/kernel'] = layer.kernel
            named[f'{layer_name}/bias'] = layer.bias
        return named


def _check_pair(f_roi: tf.Tensor, p_cls: tf.Tensor, width: int):
    check_shapes('f_roi', f_roi.shape, 'p_cls', p_cls.shape, -1, -1, 'RoI y prototipo deben tener el mismo ancho')
    check_shapes('f_roi', f_roi.shape, 'F1', (width,), -1, 0, 'ancho distinto de 2d')
    if f_roi.shape.rank == 2:
        check_shapes('f_roi', f_roi.shape, 'p_cls', p_cls.shape, 0, 0, 'número de pares distinto')


def nlf_fuse_batch(f_roi: tf.Tensor, p_cls: tf.Tensor, params: FusionParams) -> tf.Tensor:
    """
    Fusión no lineal por lotes: (N x 2d), (N x 2d) -> (N x 2d)

    f' = [F1(f ⊙ p), F2(f - p), F3([f, p]), f];  salida = F_agg(f')
    """
    f_roi = tf.convert_to_tensor(f_roi)
    p_cls = tf.convert_to_tensor(p_cls)
    _check_pair(f_roi, p_cls, params.width)
    paths = tf.concat([
        params.F1(f_roi * p_cls),
        params.F2(f_roi - p_cls),
        params.F3(tf.concat([f_roi, p_cls], axis=-1)),
        f_roi,
    ], axis=-1)
    return params.F_agg(paths)


def nlf_fuse(f_roi: RoIFeature, p_cls: ClassPrototype, params: FusionParams) -> tf.Tensor:
    """Fusión no lineal de un par RoI-prototipo, vector de longitud 2d

    Solo ve los valores: la etiqueta del prototipo no interviene.
    """
    roi = tf.convert_to_tensor(f_roi.vector)
    proto = tf.convert_to_tensor(p_cls.vector)
    if roi.shape.rank != 1 or proto.shape.rank != 1:
        raise ValidationError("nlf_fuse espera vectores (use nlf_fuse_batch para lotes)")
    return nlf_fuse_batch(roi[tf.newaxis, :], proto[tf.newaxis, :], params)[0]


def multiply_fuse_batch(f_roi: tf.Tensor, p_cls: tf.Tensor, params: FusionParams = None) -> tf.Tensor:
    """Fusión por producto elemento a elemento (sin parámetros)"""
    f_roi = tf.convert_to_tensor(f_roi)
    p_cls = tf.convert_to_tensor(p_cls)
    check_shapes('f_roi', f_roi.shape, 'p_cls', p_cls.shape, -1, -1)
    return f_roi * p_cls


def fusion_fn(kind: str) -> Callable[[tf.Tensor, tf.Tensor, FusionParams], tf.Tensor]:
    """Función de fusión por lotes según el nombre configurado"""
    if kind == 'nlf':
        return nlf_fuse_batch
    if kind == 'multiply':
        return multiply_fuse_batch
    raise ValidationError(f"Fusión desconocida: {kind} (opciones: {', '.join(FUSION_KINDS)})")
