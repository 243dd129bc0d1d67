"""Gestión de configuración: YAML + variables de entorno + flags de CLI

Precedencia (de menor a mayor): valores por defecto de las dataclasses,
fichero YAML (--config), variables de entorno FPD_* (.env incluido) y
flags explícitos de la línea de comandos.
"""
import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv
from tabulate import tabulate

from utils.validators import ValidationError, Validators

# Cargar variables de entorno desde .env
load_dotenv()

SCHEMA_VERSION = 1
STAGES = ('BASE', 'FINETUNE', 'EVAL')


def _probability_errors(section_config: Any, section: str, names: Tuple[str, ...]) -> List[str]:
    """Errores de los campos de una sección que deben estar en [0, 1]"""
    errors = []
    for name in names:
        try:
            Validators.validate_probability(getattr(section_config, name), f'{section}.{name}')
        except ValidationError as e:
            errors.append(str(e))
    return errors


@dataclass(frozen=True)
class VariantSpec:
    """Combinación de componentes de una rama de ablación"""
    aggregation: str  # 'none', 'ffa', 'dense'
    sampler: str      # 'class_specific', 'bcas', 'class_agnostic'
    fusion: str       # 'multiply', 'nlf'


VARIANTS: Dict[str, VariantSpec] = {
    'baseline': VariantSpec('none', 'class_specific', 'multiply'),
    'bcas': VariantSpec('none', 'bcas', 'multiply'),
    'bcas+nlf': VariantSpec('none', 'bcas', 'nlf'),
    'full': VariantSpec('ffa', 'bcas', 'nlf'),
    'dense-match': VariantSpec('dense', 'bcas', 'nlf'),
}


@dataclass
class BackboneConfig:
    """Backbone de juguete: etapas medias (d canales) y etapa alta (2d canales)"""
    mid_stage_spec: List[Tuple[int, int]] = field(default_factory=lambda: [(16, 2), (32, 2), (32, 1)])
    high_stage_spec: List[Tuple[int, int]] = field(default_factory=lambda: [(64, 2)])
    input_size: Tuple[int, int] = (64, 64)
    support_size: int = 32

    @property
    def d(self) -> int:
        return self.mid_stage_spec[-1][0]

    @property
    def mid_stride(self) -> int:
        stride = 1
        for _, s in self.mid_stage_spec:
            stride *= s
        return stride

    @property
    def high_stride(self) -> int:
        stride = 1
        for _, s in self.high_stage_spec:
            stride *= s
        return stride

    def mid_output_hw(self, height: int, width: int) -> Tuple[int, int]:
        """Dimensiones espaciales tras las etapas medias (padding SAME)"""
        for _, s in self.mid_stage_spec:
            height = -(-height // s)
            width = -(-width // s)
        return height, width

    def validate(self) -> List[str]:
        errors = []
        if not self.mid_stage_spec or not self.high_stage_spec:
            errors.append("backbone: mid_stage_spec y high_stage_spec no pueden estar vacíos")
            return errors
        if self.high_stage_spec[-1][0] != 2 * self.d:
            errors.append(
                f"backbone: la etapa alta debe producir 2d={2 * self.d} canales, "
                f"produce {self.high_stage_spec[-1][0]}"
            )
        for width, stride in list(self.mid_stage_spec) + list(self.high_stage_spec):
            if width < 1 or stride < 1:
                errors.append(f"backbone: etapa inválida ({width}, {stride})")
        if self.support_size < self.mid_stride:
            errors.append("backbone: support_size menor que el stride medio")
        return errors


@dataclass
class RPNConfig:
    """Anchors, propuestas y umbrales de asignación"""
    anchor_scales: Tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_train: int = 300
    post_nms_train: int = 64
    pre_nms_test: int = 300
    post_nms_test: int = 50
    nms_iou: float = 0.7
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    anchor_batch_size: int = 64
    anchor_positive_fraction: float = 0.5
    roi_positive_iou: float = 0.5
    roi_batch_size: int = 32
    roi_positive_fraction: float = 0.25

    def validate(self) -> List[str]:
        errors = _probability_errors(self, 'rpn', ('nms_iou', 'positive_iou', 'negative_iou',
                                                  'anchor_positive_fraction', 'roi_positive_iou',
                                                  'roi_positive_fraction'))
        if errors:
            return errors
        if self.positive_iou <= self.negative_iou:
            errors.append("rpn.positive_iou debe ser mayor que rpn.negative_iou")
        return errors


@dataclass
class ModelConfig:
    """Hiperparámetros del detector (escala de escritorio)"""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    n_queries: int = 5
    n_bg: Optional[int] = None       # None -> igual a n_queries
    d_prime: Optional[int] = None    # None -> igual a d
    topk: Optional[int] = None       # None -> max(1, hw // 4)
    shot_weight_mode: str = 'per_query'  # 'per_shot_scalar' o 'mean'
    roi_crop_size: int = 8
    head_hidden: Optional[int] = None    # None -> 2d
    variant: str = 'full'
    sampler_override: Optional[str] = None
    background_pairs: int = 1
    dtype: str = 'float32'

    @property
    def d(self) -> int:
        return self.backbone.d

    @property
    def resolved_d_prime(self) -> int:
        return self.d_prime if self.d_prime is not None else self.d

    @property
    def resolved_n_bg(self) -> int:
        return self.n_bg if self.n_bg is not None else self.n_queries

    @property
    def support_hw(self) -> int:
        h, w = self.backbone.mid_output_hw(self.backbone.support_size, self.backbone.support_size)
        return h * w

    @property
    def resolved_topk(self) -> int:
        return self.topk if self.topk is not None else max(1, self.support_hw // 4)

    @property
    def variant_spec(self) -> VariantSpec:
        spec = VARIANTS[self.variant]
        if self.sampler_override:
            spec = dataclasses.replace(spec, sampler=self.sampler_override)
        return spec

    def validate(self) -> List[str]:
        errors = self.backbone.validate() + self.rpn.validate()
        if self.n_queries < 1:
            errors.append("model.n_queries debe ser >= 1")
        if self.resolved_n_bg < 1:
            errors.append("model.n_bg debe ser >= 1")
        if self.resolved_d_prime < 1:
            errors.append("model.d_prime debe ser >= 1")
        if self.topk is not None and not 1 <= self.topk <= self.support_hw:
            errors.append(f"model.topk debe estar entre 1 y hw={self.support_hw}")
        if self.shot_weight_mode not in ('per_query', 'per_shot_scalar', 'mean'):
            errors.append("model.shot_weight_mode debe ser 'per_query', 'per_shot_scalar' o 'mean'")
        if self.variant not in VARIANTS:
            errors.append(f"model.variant inválida: {self.variant} (opciones: {', '.join(VARIANTS)})")
        if self.sampler_override not in (None, 'class_specific', 'bcas', 'class_agnostic'):
            errors.append(f"model.sampler_override inválido: {self.sampler_override}")
        if self.background_pairs < 0:
            errors.append("model.background_pairs no puede ser negativo")
        if self.dtype not in ('float32', 'float64'):
            errors.append("model.dtype debe ser 'float32' o 'float64'")
        return errors


@dataclass
class SyntheticDataConfig:
    """Generador de glifos sintéticos"""
    num_images: int = 400
    image_size: int = 64
    min_shape_size: int = 12
    max_shape_size: int = 16
    objects_per_image: Tuple[int, int] = (1, 3)
    num_classes: int = 9
    novel_class_ids: List[int] = field(default_factory=lambda: [2, 5, 8])
    test_fraction: float = 0.25
    output_dir: str = 'data/synthetic'

    def validate(self) -> List[str]:
        errors = []
        if self.num_classes < 3:
            errors.append("data.num_classes debe ser >= 3")
        if self.image_size < 4 * self.max_shape_size:
            errors.append("data.image_size debe ser >= 4 x max_shape_size")
        if not 0 < self.min_shape_size <= self.max_shape_size:
            errors.append("data.min_shape_size debe estar entre 1 y max_shape_size")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            errors.append("data.objects_per_image debe cumplir 1 <= min <= max")
        if not 0.0 < self.test_fraction < 1.0:
            errors.append("data.test_fraction debe estar en (0, 1)")
        for class_id in self.novel_class_ids:
            if not 0 <= class_id < self.num_classes:
                errors.append(f"data.novel_class_ids contiene una clase inexistente: {class_id}")
        return errors


@dataclass
class TrainingConfig:
    """Calendario de entrenamiento en dos etapas"""
    base_iterations: int = 200
    finetune_iterations: int = 100
    learning_rate: float = 0.01
    finetune_learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: List[int] = field(default_factory=list)
    gamma: float = 0.1
    classes_per_episode: Optional[int] = None  # None -> todas las clases de la etapa
    queries_per_episode: int = 2
    freeze_first_stage: bool = True
    freeze_rpn_max_shots: int = 2
    checkpoint_interval: int = 100

    def validate(self) -> List[str]:
        errors = []
        if self.base_iterations < 0 or self.finetune_iterations < 0:
            errors.append("training: el número de iteraciones no puede ser negativo")
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            errors.append("training: learning rate debe ser positivo")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("training.momentum debe estar en [0, 1)")
        if sorted(self.milestones) != list(self.milestones):
            errors.append("training.milestones debe estar ordenado")
        if self.classes_per_episode is not None and self.classes_per_episode < 2:
            errors.append("training.classes_per_episode debe ser >= 2")
        if self.queries_per_episode < 1:
            errors.append("training.queries_per_episode debe ser >= 1")
        if self.checkpoint_interval < 1:
            errors.append("training.checkpoint_interval debe ser >= 1")
        return errors


@dataclass
class EvalConfig:
    """Post-procesado de detecciones y métrica AP50"""
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    ap_iou: float = 0.5
    heatmap_images: int = 4

    def validate(self) -> List[str]:
        errors = _probability_errors(self, 'eval', ('score_threshold', 'nms_iou', 'ap_iou'))
        if self.max_detections < 1:
            errors.append("eval.max_detections debe ser >= 1")
        return errors


@dataclass
class RunConfig:
    """Configuración completa de una ejecución de la CLI"""
    stage: str = 'BASE'
    manifest_path: str = 'data/synthetic/manifest.json'
    output_dir: str = 'runs/default'
    base_checkpoint: Optional[str] = None
    checkpoint: Optional[str] = None
    k: int = 5
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    log_level: str = 'INFO'
    log_format: str = 'text'
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: SyntheticDataConfig = field(default_factory=SyntheticDataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # Valores de referencia a escala completa (no se ejecutan)
    FULL_SCALE_REFERENCE = {
        'learning_rate': 0.004,
        'base_iterations': {'voc': 20000, 'coco': 110000},
        'decay_milestones': {'voc': [17000], 'coco': [92000]},
        'gamma': 0.1,
        'support_size': 224,
        'max_query_size': (1333, 800),
        'batch_size': 8,
        'gpus': 2,
    }

    def validate(self) -> List[str]:
        """Valida la configuración

        Returns:
            Lista de errores de validación (vacía si todo OK)
        """
        errors = []
        if self.stage not in STAGES:
            errors.append(f"stage debe ser uno de {STAGES}")
        if self.stage == 'FINETUNE' and not self.base_checkpoint:
            errors.append("FINETUNE requiere base_checkpoint")
        if self.k < 1:
            errors.append("k debe ser >= 1")
        if self.log_format not in ('text', 'json'):
            errors.append("log_format debe ser 'text' o 'json'")
        errors += self.model.validate()
        errors += self.training.validate()
        errors += self.data.validate()
        errors += self.eval.validate()
        return errors

    def check(self) -> 'RunConfig':
        """Lanza ValidationError si hay errores de configuración"""
        errors = self.validate()
        if errors:
            raise ValidationError("Configuración inválida: " + "; ".join(errors))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    def describe(self) -> str:
        """Resumen legible de la configuración (sin rutas de log)"""
        rows = [
            ('stage', self.stage),
            ('variant', self.model.variant),
            ('K', self.k),
            ('seed', self.seed),
            ('d / d\'', f"{self.model.d} / {self.model.resolved_d_prime}"),
            ('n / n_bg', f"{self.model.n_queries} / {self.model.resolved_n_bg}"),
            ('top-k', self.model.resolved_topk),
            ('lr base / finetune', f"{self.training.learning_rate} / {self.training.finetune_learning_rate}"),
            ('iteraciones base / finetune', f"{self.training.base_iterations} / {self.training.finetune_iterations}"),
            ('manifest', self.manifest_path),
            ('output', self.output_dir),
        ]
        return tabulate(rows, headers=['parámetro', 'valor'], tablefmt='simple')


# ==================== CARGA ====================

_SECTIONS = {
    'model': ModelConfig,
    'training': TrainingConfig,
    'data': SyntheticDataConfig,
    'eval': EvalConfig,
}

_ENV_OVERRIDES = {
    'FPD_SEED': ('seed', int),
    'FPD_OUTPUT_DIR': ('output_dir', str),
    'FPD_LOG_LEVEL': ('log_level', str),
    'FPD_LOG_FORMAT': ('log_format', str),
}


def _to_plain(value: Any) -> Any:
    """Convierte tuplas en listas para una serialización estable"""
    if isinstance(value, dict):
        return {key: _to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(item) for item in value]
    return value


def _build_dataclass(cls, values: Dict[str, Any], section: str):
    """Construye una dataclass a partir de un diccionario, rechazando claves desconocidas"""
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ValidationError(f"La sección '{section}' debe ser un diccionario")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValidationError(f"Claves desconocidas en '{section}': {', '.join(sorted(unknown))}")

    kwargs = {}
    for key, value in values.items():
        if cls is ModelConfig and key == 'backbone':
            value = _build_dataclass(BackboneConfig, value, 'model.backbone')
            value.mid_stage_spec = [tuple(stage) for stage in value.mid_stage_spec]
            value.high_stage_spec = [tuple(stage) for stage in value.high_stage_spec]
            value.input_size = tuple(value.input_size)
        elif cls is ModelConfig and key == 'rpn':
            value = _build_dataclass(RPNConfig, value, 'model.rpn')
            value.anchor_scales = tuple(value.anchor_scales)
            value.anchor_ratios = tuple(value.anchor_ratios)
        elif key == 'objects_per_image':
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """Construye un RunConfig desde el diccionario del YAML (o de un checkpoint)"""
    raw = copy.deepcopy(raw or {})
    version = raw.pop('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version no soportada: {version} (esperada {SCHEMA_VERSION})")

    run_values = raw.pop('run', {}) or {}
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_dataclass(cls, raw.pop(name, None), name)

    # Los snapshots de checkpoint guardan todo plano al nivel superior
    for key in list(raw):
        if key in {f.name for f in dataclasses.fields(RunConfig)}:
            run_values.setdefault(key, raw.pop(key))
    if raw:
        raise ValidationError(f"Secciones desconocidas en la configuración: {', '.join(sorted(raw))}")

    known = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(run_values) - known
    if unknown:
        raise ValidationError(f"Claves desconocidas en 'run': {', '.join(sorted(unknown))}")
    return RunConfig(**run_values, **sections)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Carga la configuración del YAML, aplica entorno y overrides de CLI

    Args:
        path: Ruta al YAML (None -> valores por defecto)
        overrides: Valores de la CLI ya parseados (claves de RunConfig); None se ignora

    Returns:
        RunConfig validado
    """
    raw: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ValidationError(f"No existe el fichero de configuración: {path}")
        with open(config_path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f) or {}
    config = config_from_dict(raw)

    for env_name, (attr, cast) in _ENV_OVERRIDES.items():
        env_value = os.getenv(env_name)
        if env_value:
            try:
                setattr(config, attr, cast(env_value))
            except ValueError:
                raise ValidationError(f"{env_name} tiene un valor inválido: {env_value}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == 'variant':
            config.model.variant = value
        else:
            setattr(config, key, value)

    return config.check()
