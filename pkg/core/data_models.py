"""data_models.py
Modelos de datos compartidos por todo el detector few-shot

Tipos inmutables (dataclasses frozen) para mapas de características,
prototipos, episodios y detecciones, más los contenedores de parámetros
aprendibles (tf.Module) usados por la agregación de características.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import tensorflow as tf

from utils.validators import ShapeError, ValidationError, Validators

# Marcador de fila/RoI de fondo
BACKGROUND = -1


# ==============================================================================
# ENUMS
# ==============================================================================

class Mode(Enum):
    """Modo de ejecución de un episodio"""
    TRAIN = "TRAIN"
    TEST = "TEST"


class ClassRole(Enum):
    """Rol de una clase en el protocolo few-shot"""
    BASE = "BASE"
    NOVEL = "NOVEL"


# ==============================================================================
# MAPAS DE CARACTERÍSTICAS
# ==============================================================================

@dataclass(frozen=True)
class FeatureMap:
    """Rejilla (height x width x channels) de reales finitos

    flatten() la convierte en una matriz (HW x d) en orden row-major.
    """
    values: tf.Tensor

    def __post_init__(self):
        values = tf.convert_to_tensor(self.values)
        if values.shape.rank != 3:
            raise ValidationError(f"FeatureMap necesita rango 3 (H, W, C), recibido {values.shape}")
        if min(values.shape) < 1:
            raise ValidationError(f"FeatureMap con dimensiones vacías: {values.shape}")
        Validators.validate_finite(values, 'FeatureMap')
        object.__setattr__(self, 'values', values)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def channels(self) -> int:
        return int(self.values.shape[2])

    @property
    def dtype(self) -> tf.DType:
        return self.values.dtype

    def flatten(self) -> tf.Tensor:
        """Matriz (height*width x channels)"""
        return tf.reshape(self.values, (self.height * self.width, self.channels))

    @classmethod
    def from_flat(cls, flat: tf.Tensor, height: int, width: int) -> 'FeatureMap':
        """Inversa de flatten()"""
        flat = tf.convert_to_tensor(flat)
        if flat.shape.rank != 2 or flat.shape[0] != height * width:
            raise ShapeError('flat', flat.shape, 'grid', (height, width), 'filas != height*width')
        return cls(tf.reshape(flat, (height, width, flat.shape[1])))


# ==============================================================================
# PARÁMETROS APRENDIBLES DE LA AGREGACIÓN
# ==============================================================================

def normal_variable(rng: np.random.Generator, shape: Tuple[int, ...], scale: float, dtype) -> tf.Variable:
    return tf.Variable(rng.normal(0.0, scale, size=shape).astype(dtype.as_numpy_dtype))


@dataclass
class FeatureQuerySet:
    """Feature queries exclusivas de una clase, matriz (n x d')"""
    class_id: int
    queries: tf.Variable

    @property
    def n(self) -> int:
        return int(self.queries.shape[0])

    @property
    def d_prime(self) -> int:
        return int(self.queries.shape[1])

    @classmethod
    def initialize(cls, class_id: int, n: int, d_prime: int, rng: np.random.Generator,
                   dtype=tf.float32) -> 'FeatureQuerySet':
        return cls(class_id, normal_variable(rng, (n, d_prime), 1.0, tf.as_dtype(dtype)))


def stack_queries(query_sets: Sequence[FeatureQuerySet]) -> Tuple[tf.Tensor, Tuple[int, ...]]:
    """Apila las queries de varias clases: (n*c x d') y la clase de cada fila"""
    if not query_sets:
        raise ValidationError("No hay feature queries que apilar")
    n_values = {qs.n for qs in query_sets}
    if len(n_values) != 1:
        raise ValidationError(f"Todas las clases deben tener el mismo n, recibido {sorted(n_values)}")
    stacked = tf.concat([qs.queries for qs in query_sets], axis=0)
    sources = tuple(qs.class_id for qs in query_sets for _ in range(qs.n))
    return stacked, sources


class ProjectionParams(tf.Module):
    """
    Proyecciones y embeddings de la agregación de grano fino

    Args:
        d: Canales del mapa medio
        d_prime: Dimensión latente de las proyecciones
        n_bg: Número de prototipos de fondo
        class_ids: Clases con embedding de clase
        rng: Generador con semilla para la inicialización
    """

    def __init__(self, d: int, d_prime: int, n_bg: int, class_ids: Sequence[int],
                 rng: np.random.Generator, dtype=tf.float32, name: str = 'projection_params'):
        super().__init__(name=name)
        Validators.validate_positive_int(n_bg, 'n_bg')
        dtype = tf.as_dtype(dtype)
        self.d = d
        self.d_prime = d_prime
        self.dtype = dtype
        scale = 1.0 / np.sqrt(d)
        self.W = normal_variable(rng, (d, d_prime), scale, dtype)
        self.W_prime = normal_variable(rng, (d, d_prime), scale, dtype)
        self.class_embeddings: Dict[int, tf.Variable] = {}
        for class_id in class_ids:
            self.class_embeddings[int(class_id)] = normal_variable(rng, (d,), 0.02, dtype)
        # Puerta residual: exactamente 0 al construir
        self.alpha = tf.Variable(tf.zeros((), dtype=dtype))
        self.background_queries = normal_variable(rng, (n_bg, d), 0.1, dtype)

    @property
    def n_bg(self) -> int:
        return int(self.background_queries.shape[0])

    def class_embedding(self, class_id: int) -> tf.Variable:
        if class_id not in self.class_embeddings:
            raise ValidationError(f"La clase {class_id} no tiene embedding de clase")
        return self.class_embeddings[class_id]

    def add_class(self, class_id: int) -> tf.Variable:
        """Crea un embedding nuevo (ceros) para una clase novel"""
        if class_id in self.class_embeddings:
            raise ValidationError(f"La clase {class_id} ya tiene embedding de clase")
        self.class_embeddings[int(class_id)] = tf.Variable(tf.zeros((self.d,), dtype=self.dtype))
        return self.class_embeddings[class_id]


# ==============================================================================
# PROTOTIPOS
# ==============================================================================

@dataclass(frozen=True)
class PrototypeSet:
    """Prototipos de grano fino de una clase, matriz (n x d)"""
    class_id: int
    prototypes: tf.Tensor

    @property
    def n(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def d(self) -> int:
        return int(self.prototypes.shape[1])


@dataclass(frozen=True)
class PrototypeBank:
    """Prototipos de todas las clases seguidos de los de fondo, ((n*c + n_bg) x d)"""
    rows: tf.Tensor
    row_labels: Tuple[int, ...]

    def __post_init__(self):
        if len(self.row_labels) != int(self.rows.shape[0]):
            raise ValidationError(
                f"row_labels ({len(self.row_labels)}) no coincide con el número de filas ({self.rows.shape[0]})"
            )

    @property
    def size(self) -> int:
        return len(self.row_labels)

    @property
    def class_order(self) -> Tuple[int, ...]:
        seen: List[int] = []
        for label in self.row_labels:
            if label != BACKGROUND and label not in seen:
                seen.append(label)
        return tuple(seen)


@dataclass(frozen=True)
class ClassPrototype:
    """Prototipo de clase de alto nivel, vector de longitud 2d"""
    vector: tf.Tensor
    label: int


@dataclass(frozen=True)
class RoIFeature:
    """Característica de una RoI (vector 2d), su caja y su clase asignada"""
    vector: tf.Tensor
    source_box: Tuple[float, float, float, float]
    label: int = BACKGROUND

    @property
    def is_foreground(self) -> bool:
        return self.label != BACKGROUND


# ==============================================================================
# EPISODIOS
# ==============================================================================

@dataclass(frozen=True)
class QueryImage:
    """Imagen de consulta con sus cajas (x1, y1, x2, y2) y etiquetas"""
    image_id: int
    image: np.ndarray
    boxes: np.ndarray
    labels: Tuple[int, ...]

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) != len(self.labels):
            raise ValidationError(f"Imagen {self.image_id}: {len(boxes)} cajas y {len(self.labels)} etiquetas")
        object.__setattr__(self, 'boxes', boxes)


@dataclass(frozen=True)
class SupportCrop:
    """Recorte de instancia redimensionado a support_size"""
    image: np.ndarray
    source_image_id: int
    class_id: int


@dataclass(frozen=True)
class Episode:
    """Unidad de entrenamiento/evaluación: consultas + K recortes por clase"""
    query_images: Tuple[QueryImage, ...]
    support_crops: Mapping[int, Tuple[SupportCrop, ...]]
    class_roster: Tuple[int, ...]

    def __post_init__(self):
        if not self.class_roster:
            raise ValidationError("El episodio no tiene clases")
        if len(set(self.class_roster)) != len(self.class_roster):
            raise ValidationError(f"class_roster con clases repetidas: {self.class_roster}")
        shots = {len(self.support_crops.get(c, ())) for c in self.class_roster}
        if len(shots) != 1 or 0 in shots:
            raise ValidationError(f"Cada clase del episodio necesita exactamente K recortes, recibido {shots}")
        extra = set(self.support_crops) - set(self.class_roster)
        if extra:
            raise ValidationError(f"Recortes de soporte para clases fuera del roster: {sorted(extra)}")
        roster = set(self.class_roster)
        for query in self.query_images:
            stray = set(query.labels) - roster
            if stray:
                raise ValidationError(
                    f"Imagen {query.image_id} tiene etiquetas fuera del roster: {sorted(stray)}"
                )

    @property
    def k(self) -> int:
        return len(self.support_crops[self.class_roster[0]])

    @property
    def query_image_ids(self) -> Tuple[int, ...]:
        return tuple(q.image_id for q in self.query_images)

    @property
    def support_image_ids(self) -> Tuple[int, ...]:
        return tuple(crop.source_image_id for crops in self.support_crops.values() for crop in crops)


# ==============================================================================
# DETECCIONES
# ==============================================================================

@dataclass(frozen=True)
class Detection:
    """Detección final en coordenadas de imagen"""
    box: Tuple[float, float, float, float]
    class_id: int
    score: float
    image_id: int = -1

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValidationError(f"Caja degenerada: {self.box}")
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"Score inválido: {self.score}")

    def to_dict(self) -> Dict:
        return {
            'image_id': self.image_id,
            'class_id': self.class_id,
            'score': float(self.score),
            'box': [float(v) for v in self.box],
        }
