"""dataset.py
Conjunto de datos sintético few-shot y manifiesto en disco

Cada clase es una combinación forma x textura; algunas clases comparten
forma y solo se distinguen por la textura. Las imágenes se guardan como
PNG y el manifiesto es un único JSON versionado con rutas relativas.

Splits:
    base-train   imágenes de entrenamiento, solo anotaciones de clases base
    test         imágenes de test, todas las anotaciones
    finetune-K   exactamente K anotaciones por clase (base y novel), solo
                 de imágenes de entrenamiento (ver make_kshot_split)
"""
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import tensorflow as tf

from config.settings import SyntheticDataConfig
from core.data_models import ClassRole
from utils.validators import ValidationError, Validators

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
SHAPES = ('square', 'circle', 'triangle', 'diamond')
TEXTURES = ('solid', 'stripes', 'checker')
BASE_TRAIN = 'base-train'
TEST = 'test'


def finetune_split_name(k: int) -> str:
    return f'finetune-{k}'


# ==============================================================================
# MANIFIESTO
# ==============================================================================

@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    role: ClassRole


@dataclass(frozen=True)
class Annotation:
    """Caja (x1, y1, x2, y2) en píxeles, x2/y2 exclusivos"""
    id: int
    box: Tuple[float, float, float, float]
    class_id: int


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file: str
    height: int
    width: int
    annotations: Tuple[Annotation, ...]


@dataclass(frozen=True)
class SplitEntry:
    image_id: int
    annotation_ids: Tuple[int, ...]


@dataclass
class DatasetManifest:
    """
    Manifiesto del conjunto de datos

    root es el directorio del fichero (no se serializa); las rutas de las
    imágenes son relativas a él.
    """
    classes: Tuple[ClassInfo, ...]
    images: Tuple[ImageRecord, ...]
    splits: Dict[str, Tuple[SplitEntry, ...]]
    seed: int = 0
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path = field(default=Path('.'), compare=False)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"Clases repetidas en el manifiesto: {ids}")
        overlap = set(self.base_class_ids) & set(self.novel_class_ids)
        if overlap:
            raise ValidationError(f"Clases base y novel no son disjuntas: {sorted(overlap)}")
        self._images = {img.id: img for img in self.images}
        self._annotations = {ann.id: (img, ann) for img in self.images for ann in img.annotations}

    # ------------------------------------------------------------ consultas

    @property
    def base_class_ids(self) -> List[int]:
        return [c.id for c in self.classes if c.role == ClassRole.BASE]

    @property
    def novel_class_ids(self) -> List[int]:
        return [c.id for c in self.classes if c.role == ClassRole.NOVEL]

    @property
    def class_ids(self) -> List[int]:
        return [c.id for c in self.classes]

    def class_name(self, class_id: int) -> str:
        for c in self.classes:
            if c.id == class_id:
                return c.name
        raise ValidationError(f"Clase desconocida: {class_id}")

    def image(self, image_id: int) -> ImageRecord:
        if image_id not in self._images:
            raise ValidationError(f"Imagen desconocida: {image_id}")
        return self._images[image_id]

    def has_split(self, split: str) -> bool:
        return split in self.splits

    def split_entries(self, split: str) -> Tuple[SplitEntry, ...]:
        if split not in self.splits:
            raise ValidationError(f"El manifiesto no tiene el split '{split}' (disponibles: {sorted(self.splits)})")
        return self.splits[split]

    def split_image_ids(self, split: str) -> List[int]:
        return [entry.image_id for entry in self.split_entries(split)]

    def split_annotations(self, split: str) -> List[Tuple[ImageRecord, Annotation]]:
        """Pares (imagen, anotación) del split en orden de aparición"""
        pairs = []
        for entry in self.split_entries(split):
            for ann_id in entry.annotation_ids:
                pairs.append(self._annotations[ann_id])
        return pairs

    def annotation_count(self, split: str) -> Dict[int, int]:
        counts = {c: 0 for c in self.class_ids}
        for _, ann in self.split_annotations(split):
            counts[ann.class_id] += 1
        return counts

    # ------------------------------------------------------------ serialización

    def to_dict(self) -> Dict:
        return {
            'schema_version': self.schema_version,
            'seed': self.seed,
            'classes': [{'id': c.id, 'name': c.name, 'role': c.role.value} for c in self.classes],
            'images': [
                {
                    'id': img.id, 'file': img.file, 'height': img.height, 'width': img.width,
                    'annotations': [
                        {'id': ann.id, 'box': [float(v) for v in ann.box], 'class_id': ann.class_id}
                        for ann in img.annotations
                    ],
                }
                for img in self.images
            ],
            'splits': {
                name: [{'image_id': e.image_id, 'annotation_ids': list(e.annotation_ids)} for e in entries]
                for name, entries in self.splits.items()
            },
        }

    @classmethod
    def from_dict(cls, raw: Dict, root: Path = Path('.')) -> 'DatasetManifest':
        version = raw.get('schema_version')
        if version != MANIFEST_SCHEMA_VERSION:
            raise ValidationError(f"schema_version de manifiesto no soportada: {version}")
        try:
            classes = tuple(ClassInfo(int(c['id']), c['name'], ClassRole(c['role'])) for c in raw['classes'])
            images = tuple(
                ImageRecord(
                    id=int(img['id']), file=img['file'], height=int(img['height']), width=int(img['width']),
                    annotations=tuple(
                        Annotation(int(a['id']), tuple(float(v) for v in a['box']), int(a['class_id']))
                        for a in img['annotations']
                    ),
                )
                for img in raw['images']
            )
            splits = {
                name: tuple(SplitEntry(int(e['image_id']), tuple(int(i) for i in e['annotation_ids'])) for e in entries)
                for name, entries in raw['splits'].items()
            }
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Manifiesto mal formado: {e}")
        return cls(classes=classes, images=images, splits=splits, seed=int(raw.get('seed', 0)),
                   schema_version=version, root=root)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding='utf-8')
        return path


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Manifiesto no encontrado: {path}")
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ValidationError(f"Manifiesto {path} no es JSON válido: {e}")
    return DatasetManifest.from_dict(raw, root=path.parent)


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    return manifest.write(path)


# ==============================================================================
# GENERACIÓN SINTÉTICA
# ==============================================================================

def class_name(class_id: int) -> str:
    shape = SHAPES[class_id // len(TEXTURES)]
    texture = TEXTURES[class_id % len(TEXTURES)]
    return f'{shape}-{texture}'


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Máscara booleana (size x size) de la forma"""
    ys, xs = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == 'square':
        return np.ones((size, size), dtype=bool)
    if shape == 'circle':
        return (xs - c) ** 2 + (ys - c) ** 2 <= (size / 2.0) ** 2
    if shape == 'triangle':
        # vértice arriba, base abajo
        half_width = (ys + 1) / size * (size / 2.0)
        return np.abs(xs - c) <= half_width
    if shape == 'diamond':
        return np.abs(xs - c) + np.abs(ys - c) <= size / 2.0
    raise ValidationError(f"Forma desconocida: {shape}")


def _texture_pattern(texture: str, size: int) -> np.ndarray:
    """Intensidad relativa (size x size) en [0.25, 1]"""
    ys, xs = np.mgrid[0:size, 0:size]
    if texture == 'solid':
        return np.ones((size, size))
    if texture == 'stripes':
        return np.where((xs // 2) % 2 == 0, 1.0, 0.25)
    if texture == 'checker':
        return np.where(((xs // 2) + (ys // 2)) % 2 == 0, 1.0, 0.25)
    raise ValidationError(f"Textura desconocida: {texture}")


def _boxes_overlap(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def render_image(config: SyntheticDataConfig, rng: np.random.Generator,
                 first_annotation_id: int) -> Tuple[np.ndarray, List[Annotation]]:
    """
    Dibuja una imagen con glifos sin solapamiento

    Returns:
        (imagen uint8 HxWx3, anotaciones con cajas exactas de la máscara)
    """
    size = config.image_size
    canvas = rng.uniform(0.0, 0.15, size=(size, size, 3))
    lo, hi = config.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    placed: List[Tuple[int, int, int, int]] = []
    annotations: List[Annotation] = []

    for _ in range(count):
        class_id = int(rng.integers(config.num_classes))
        glyph = int(rng.integers(config.min_shape_size, config.max_shape_size + 1))
        color = rng.uniform(0.5, 1.0, size=3)
        for _attempt in range(20):
            x = int(rng.integers(0, size - glyph + 1))
            y = int(rng.integers(0, size - glyph + 1))
            if not any(_boxes_overlap((x, y, x + glyph, y + glyph), other) for other in placed):
                break
        else:
            continue
        shape = SHAPES[class_id // len(TEXTURES)]
        texture = TEXTURES[class_id % len(TEXTURES)]
        mask = _shape_mask(shape, glyph)
        pattern = _texture_pattern(texture, glyph)
        region = canvas[y:y + glyph, x:x + glyph]
        region[mask] = pattern[mask][:, None] * color[None, :]

        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = (float(x + cols[0]), float(y + rows[0]), float(x + cols[-1] + 1), float(y + rows[-1] + 1))
        placed.append((x, y, x + glyph, y + glyph))
        annotations.append(Annotation(first_annotation_id + len(annotations), box, class_id))

    image = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    return image, annotations


def generate_synthetic(config: SyntheticDataConfig, seed: int,
                       output_dir: Optional[Union[str, Path]] = None) -> DatasetManifest:
    """
    Genera imágenes PNG y el manifiesto (output_dir/manifest.json)

    Determinista por semilla: cada imagen usa su propio generador derivado de
    (seed, índice), así el resultado no depende del orden de generación.

    Raises:
        ValidationError: Configuración inválida
        OSError: Directorio de salida no escribible
    """
    errors = config.validate()
    max_classes = len(SHAPES) * len(TEXTURES)
    if config.num_classes > max_classes:
        errors.append(f"data.num_classes no puede superar {max_classes}")
    if errors:
        raise ValidationError("Configuración de datos inválida: " + "; ".join(errors))

    root = Path(output_dir or config.output_dir)
    (root / 'images').mkdir(parents=True, exist_ok=True)

    novel = set(config.novel_class_ids)
    classes = tuple(
        ClassInfo(c, class_name(c), ClassRole.NOVEL if c in novel else ClassRole.BASE)
        for c in range(config.num_classes)
    )

    images: List[ImageRecord] = []
    next_annotation = 0
    for index in range(config.num_images):
        rng = np.random.default_rng([int(seed), index])
        pixels, annotations = render_image(config, rng, next_annotation)
        next_annotation += len(annotations)
        relative = f'images/{index:05d}.png'
        (root / relative).write_bytes(tf.io.encode_png(pixels).numpy())
        images.append(ImageRecord(index, relative, config.image_size, config.image_size, tuple(annotations)))

    num_train = int(round(config.num_images * (1.0 - config.test_fraction)))
    base_ids = {c.id for c in classes if c.role == ClassRole.BASE}
    base_train = []
    for img in images[:num_train]:
        kept = tuple(ann.id for ann in img.annotations if ann.class_id in base_ids)
        if kept:
            base_train.append(SplitEntry(img.id, kept))
    test = tuple(SplitEntry(img.id, tuple(ann.id for ann in img.annotations)) for img in images[num_train:])

    manifest = DatasetManifest(
        classes=classes, images=tuple(images),
        splits={BASE_TRAIN: tuple(base_train), TEST: test},
        seed=int(seed), root=root,
    )
    manifest.write(root / 'manifest.json')
    logger.info(
        f"✅ Dataset sintético generado en {root}: {len(images)} imágenes, {next_annotation} objetos, "
        f"{len(base_train)} base-train / {len(test)} test"
    )
    return manifest


# ==============================================================================
# SPLIT K-SHOT
# ==============================================================================

def make_kshot_split(manifest: DatasetManifest, k: int, novel_class_ids: Sequence[int],
                     seed: int) -> DatasetManifest:
    """
    Añade el split finetune-K: exactamente K anotaciones por clase

    Las anotaciones se eligen entre imágenes que no están en el split de
    test, para clases base y novel por igual.

    Raises:
        ValidationError: Clase con menos de K instancias o clases novel que
                         no coinciden con el manifiesto
    """
    k = Validators.validate_positive_int(k, 'K')
    if sorted(int(c) for c in novel_class_ids) != sorted(manifest.novel_class_ids):
        raise ValidationError(
            f"Clases novel {sorted(novel_class_ids)} no coinciden con el manifiesto {manifest.novel_class_ids}"
        )
    test_images = set(manifest.split_image_ids(TEST)) if manifest.has_split(TEST) else set()
    rng = np.random.default_rng([int(seed), k])

    selected: Dict[int, List[int]] = {}
    for class_id in sorted(manifest.class_ids):
        candidates = [
            (img.id, ann.id) for img in manifest.images if img.id not in test_images
            for ann in img.annotations if ann.class_id == class_id
        ]
        if len(candidates) < k:
            raise ValidationError(
                f"La clase {class_id} ({manifest.class_name(class_id)}) tiene {len(candidates)} "
                f"instancias de entrenamiento, se necesitan K={k}"
            )
        for index in sorted(rng.choice(len(candidates), size=k, replace=False).tolist()):
            image_id, ann_id = candidates[index]
            selected.setdefault(image_id, []).append(ann_id)

    entries = tuple(SplitEntry(image_id, tuple(sorted(ann_ids))) for image_id, ann_ids in sorted(selected.items()))
    splits = dict(manifest.splits)
    splits[finetune_split_name(k)] = entries
    logger.info(f"✅ Split {finetune_split_name(k)}: {sum(len(e.annotation_ids) for e in entries)} anotaciones "
                f"en {len(entries)} imágenes")
    return replace(manifest, splits=splits)


# ==============================================================================
# ALMACÉN DE IMÁGENES
# ==============================================================================

class ImageStore:
    """
    Carga perezosa de imágenes PNG como float32 en [0, 1] con caché LRU

    Args:
        manifest: Manifiesto del dataset
        max_cached_images: Imágenes decodificadas que se conservan (default: 512)
    """

    def __init__(self, manifest: DatasetManifest, max_cached_images: int = 512):
        self.manifest = manifest
        self.max_cached_images = Validators.validate_positive_int(max_cached_images, 'max_cached_images')
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._cache)

    def load(self, image_id: int) -> np.ndarray:
        if image_id in self._cache:
            self._cache.move_to_end(image_id)
            return self._cache[image_id]
        record = self.manifest.image(image_id)
        raw = tf.io.read_file(str(self.manifest.root / record.file))
        pixels = tf.io.decode_png(raw, channels=3)
        # Llena: sale la menos usada
        if len(self._cache) >= self.max_cached_images:
            oldest = next(iter(self._cache))
            del self._cache[oldest]
            self.evictions += 1
            logger.debug(f"Imagen {oldest} expulsada de la caché")
        self._cache[image_id] = pixels.numpy().astype(np.float32) / 255.0
        return self._cache[image_id]

    def crop(self, image_id: int, box: Sequence[float], size: int) -> np.ndarray:
        """Recorte de la caja redimensionado a (size x size)"""
        image = self.load(image_id)
        height, width = image.shape[:2]
        x1 = int(np.clip(np.floor(box[0]), 0, width - 1))
        y1 = int(np.clip(np.floor(box[1]), 0, height - 1))
        x2 = int(np.clip(np.ceil(box[2]), x1 + 1, width))
        y2 = int(np.clip(np.ceil(box[3]), y1 + 1, height))
        patch = image[y1:y2, x1:x2]
        return tf.image.resize(patch, (size, size), method='bilinear').numpy().astype(np.float32)
