"""profiler.py
Modelo analítico de coste en inferencia

Cuenta parámetros y multiplicaciones-acumulaciones (MACs) de tres ramas:
baseline (sin agregación), completa (FFA + NLF) y emparejamiento denso.

- Escala de escritorio: los parámetros salen de detectores reales construidos
  con cada variante; los MACs se cuentan capa a capa por imagen.
- Escala completa: dimensiones simbólicas de un detector ResNet-101 C4 sobre
  VOC (20 clases); el coste del baseline se toma como valor de referencia y se
  le suman los incrementos analíticos de cada rama. No se ejecuta nada.

El coste de destilación depende solo del soporte y se cachea entre
imágenes, por eso se informa aparte (support_macs).
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from config.settings import BackboneConfig, ModelConfig, RunConfig
from core.detector import FewShotDetector

logger = logging.getLogger(__name__)

PROFILED_VARIANTS = ('baseline', 'full', 'dense-match')


@dataclass(frozen=True)
class CostDims:
    """Dimensiones que determinan el coste de agregación y fusión"""
    d: int               # canales del mapa medio
    d_prime: int         # dimensión de proyección
    query_cells: int     # HW
    support_cells: int   # hw
    classes: int         # c
    n: int               # feature queries por clase
    n_bg: int            # prototipos de fondo
    rois: int            # propuestas por imagen en test
    shots: int = 1       # K

    @property
    def fusion_width(self) -> int:
        return 2 * self.d

    @property
    def bank_rows(self) -> int:
        return self.n * self.classes + self.n_bg


# Escala completa: C4 de ResNet-101 (1024 canales), imagen ~1000x600 a stride 16,
# recortes de soporte 224 -> 14x14, VOC con 20 clases
FULL_SCALE_DIMS = CostDims(d=1024, d_prime=1024, query_cells=4200, support_cells=196,
                           classes=20, n=5, n_bg=5, rois=100)

# Valores de referencia a escala completa (params en millones, GFLOPs); el baseline es el punto de partida
FULL_SCALE_REFERENCE = {
    'baseline': {'params_m': 45.99, 'gflops': 709.76},
    'full': {'params_m': 65.68, 'gflops': 818.10},
    'dense-match': {'params_m': 69.58, 'gflops': 956.72},
}


# ==============================================================================
# FÓRMULAS
# ==============================================================================

def ffa_assignment_macs(dims: CostDims) -> int:
    """HW·d·d' + B·d·d' + HW·B·(d + d'), con B = n·c + n_bg"""
    d, dp, hw_q, rows = dims.d, dims.d_prime, dims.query_cells, dims.bank_rows
    return hw_q * d * dp + rows * d * dp + hw_q * rows * (d + dp)


def ffa_distillation_macs(dims: CostDims) -> int:
    """Coste de soporte: c·K·(hw·d·d' + n·hw·(d' + d))"""
    d, dp, hw = dims.d, dims.d_prime, dims.support_cells
    return dims.classes * dims.shots * (hw * d * dp + dims.n * hw * (dp + d))


def dense_match_macs(dims: CostDims) -> int:
    """HW·d·d' + c·K·hw·d·d' + HW·c·K·hw·(d + d')"""
    d, dp, hw_q = dims.d, dims.d_prime, dims.query_cells
    cells = dims.classes * dims.shots * dims.support_cells
    return hw_q * d * dp + cells * d * dp + hw_q * cells * (d + dp)


def drd_encoder_params(d: int) -> int:
    """Encoders clave (d -> d/8) y valor (d -> d/2) en consulta y soporte, con bias"""
    key, value = max(1, d // 8), max(1, d // 2)
    return 2 * (d * key + key + d * value + value)


def drd_encoder_macs(dims: CostDims) -> int:
    key, value = max(1, dims.d // 8), max(1, dims.d // 2)
    cells = dims.query_cells + dims.classes * dims.shots * dims.support_cells
    return cells * dims.d * (key + value)


def ffa_param_count(dims: CostDims) -> int:
    """W, W', queries, embeddings de clase, fondo y alpha"""
    d, dp = dims.d, dims.d_prime
    return 2 * d * dp + dims.classes * dims.n * dp + dims.classes * d + dims.n_bg * d + 1


def nlf_param_count(width: int) -> int:
    """F1, F2 (w -> w), F3 (2w -> w) y F_agg (4w -> w), con bias"""
    return width * width * (1 + 1 + 2 + 4) + 4 * width


def nlf_macs(dims: CostDims) -> int:
    width = dims.fusion_width
    return dims.rois * dims.classes * width * width * (1 + 1 + 2 + 4)


def multiply_fusion_macs(dims: CostDims) -> int:
    return dims.rois * dims.classes * dims.fusion_width


def conv_stack_macs(stages: Sequence[Tuple[int, int]], in_channels: int, height: int, width: int,
                    kernel: int = 3) -> Tuple[int, int, int, int]:
    """
    MACs de una pila de convoluciones (padding SAME)

    Returns:
        (macs, canales de salida, alto, ancho)
    """
    macs = 0
    for channels, stride in stages:
        height, width = -(-height // stride), -(-width // stride)
        macs += height * width * kernel * kernel * in_channels * channels
        in_channels = channels
    return macs, in_channels, height, width


# ==============================================================================
# FILAS DEL INFORME
# ==============================================================================

@dataclass
class CostRow:
    """Coste de una rama a una escala"""
    scale: str
    variant: str
    params: float
    macs: float
    support_macs: float = 0.0
    breakdown: Dict[str, float] = field(default_factory=dict)
    reference: Optional[Dict[str, float]] = None

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    def to_dict(self) -> Dict:
        data = {
            'scale': self.scale,
            'variant': self.variant,
            'params': float(self.params),
            'params_m': round(self.params_m, 4),
            'macs': float(self.macs),
            'gmacs': round(self.gmacs, 4),
            'support_macs': float(self.support_macs),
            'breakdown': {k: float(v) for k, v in sorted(self.breakdown.items())},
        }
        if self.reference is not None:
            data['reference'] = self.reference
        return data


def full_scale_rows(dims: CostDims = FULL_SCALE_DIMS) -> List[CostRow]:
    """
    Filas simbólicas a escala completa

    La rama densa usa las mismas proyecciones W/W' más los encoders
    clave/valor de un módulo de relación densa en consulta y soporte.
    """
    base_params = FULL_SCALE_REFERENCE['baseline']['params_m'] * 1e6
    base_macs = FULL_SCALE_REFERENCE['baseline']['gflops'] * 1e9
    fusion_delta = nlf_macs(dims) - multiply_fusion_macs(dims)
    nlf_params = nlf_param_count(dims.fusion_width)

    ffa_breakdown = {
        'assignment': ffa_assignment_macs(dims),
        'nlf_delta': fusion_delta,
    }
    dense_breakdown = {
        'dense_attention': dense_match_macs(dims),
        'drd_encoders': drd_encoder_macs(dims),
        'nlf_delta': fusion_delta,
    }
    dense_params = 2 * dims.d * dims.d_prime + 1 + drd_encoder_params(dims.d) + nlf_params
    return [
        CostRow('full', 'baseline', base_params, base_macs,
                reference=FULL_SCALE_REFERENCE['baseline']),
        CostRow('full', 'full', base_params + ffa_param_count(dims) + nlf_params,
                base_macs + sum(ffa_breakdown.values()), ffa_distillation_macs(dims),
                ffa_breakdown, FULL_SCALE_REFERENCE['full']),
        CostRow('full', 'dense-match', base_params + dense_params,
                base_macs + sum(dense_breakdown.values()), 0.0,
                dense_breakdown, FULL_SCALE_REFERENCE['dense-match']),
    ]


def desk_scale_dims(model: ModelConfig, num_classes: int, shots: int = 1) -> CostDims:
    backbone = model.backbone
    query_h, query_w = backbone.mid_output_hw(*backbone.input_size)
    return CostDims(
        d=model.d, d_prime=model.resolved_d_prime, query_cells=query_h * query_w,
        support_cells=model.support_hw, classes=num_classes, n=model.n_queries,
        n_bg=model.resolved_n_bg, rois=model.rpn.post_nms_test, shots=shots,
    )


def _detector_macs(model: ModelConfig, dims: CostDims) -> Dict[str, int]:
    """MACs por imagen de la parte común (backbone, RPN, RoIs, cabeza)"""
    backbone: BackboneConfig = model.backbone
    mid, d, height, width = conv_stack_macs(backbone.mid_stage_spec, 3, *backbone.input_size)
    anchors = len(model.rpn.anchor_scales) * len(model.rpn.anchor_ratios)
    rpn = height * width * (9 * d * d + d * anchors + d * 4 * anchors)
    crop = model.roi_crop_size
    high, high_channels, _, _ = conv_stack_macs(backbone.high_stage_spec, d, crop, crop)
    hidden = model.head_hidden or dims.fusion_width
    head = dims.fusion_width * hidden + hidden * (1 + dims.classes) + hidden * 4
    return {
        'backbone': mid,
        'rpn': rpn,
        'roi_high': dims.rois * high,
        'head': dims.rois * dims.classes * head,
    }


def _support_macs(model: ModelConfig, dims: CostDims) -> int:
    backbone = model.backbone
    size = backbone.support_size
    mid, d, height, width = conv_stack_macs(backbone.mid_stage_spec, 3, size, size)
    high, _, _, _ = conv_stack_macs(backbone.high_stage_spec, d, height, width)
    return dims.classes * dims.shots * (mid + high)


def _desk_param_count(model: ModelConfig, variant: str, num_classes: int) -> int:
    variant_model = dataclasses.replace(model, variant=variant, sampler_override=None)
    detector = FewShotDetector(variant_model, list(range(num_classes)), np.random.default_rng(0))
    return int(sum(
        np.prod(var.shape) for name, var in detector.named_variables().items() if detector._uses(name)
    ))


def desk_scale_rows(model: ModelConfig, num_classes: int, shots: int = 1) -> List[CostRow]:
    """Filas a escala de escritorio para las tres ramas"""
    dims = desk_scale_dims(model, num_classes, shots)
    common = _detector_macs(model, dims)
    support = _support_macs(model, dims)
    rows = []
    for variant in PROFILED_VARIANTS:
        breakdown = dict(common)
        support_macs = support
        if variant == 'baseline':
            breakdown['fusion'] = multiply_fusion_macs(dims)
        else:
            breakdown['fusion'] = nlf_macs(dims)
        if variant == 'full':
            breakdown['assignment'] = ffa_assignment_macs(dims)
            support_macs += ffa_distillation_macs(dims)
        elif variant == 'dense-match':
            breakdown['dense_attention'] = dense_match_macs(dims)
        rows.append(CostRow('desk', variant, _desk_param_count(model, variant, num_classes),
                            sum(breakdown.values()), support_macs, breakdown))
    return rows


# ==============================================================================
# INFORME
# ==============================================================================

@dataclass
class CostReport:
    rows: List[CostRow]
    desk_dims: CostDims
    full_dims: CostDims = FULL_SCALE_DIMS

    def row(self, scale: str, variant: str) -> CostRow:
        for row in self.rows:
            if row.scale == scale and row.variant == variant:
                return row
        raise KeyError(f"{scale}/{variant}")

    def orderings(self) -> Dict[str, bool]:
        """Comprobaciones de orden que debe respetar el modelo"""
        checks = {}
        for scale, dims in (('desk', self.desk_dims), ('full', self.full_dims)):
            checks[f'{scale}_ffa_below_dense_attention'] = (
                ffa_assignment_macs(dims) < dense_match_macs(dims)
                if dims.bank_rows < dims.classes * dims.support_cells else True
            )
            checks[f'{scale}_params_baseline_below_full'] = (
                self.row(scale, 'baseline').params < self.row(scale, 'full').params
            )
        checks['full_params_full_below_dense'] = self.row('full', 'full').params < self.row('full', 'dense-match').params
        checks['full_macs_full_below_dense'] = self.row('full', 'full').macs < self.row('full', 'dense-match').macs
        return checks

    def to_dict(self) -> Dict:
        return {
            'desk_dims': dataclasses.asdict(self.desk_dims),
            'full_dims': dataclasses.asdict(self.full_dims),
            'rows': [row.to_dict() for row in self.rows],
            'orderings': self.orderings(),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n', encoding='utf-8')
        return path

    def table(self) -> str:
        rows = []
        for row in self.rows:
            ref = row.reference or {}
            rows.append([
                row.scale, row.variant, f"{row.params_m:.4f}", f"{row.gmacs:.4f}",
                f"{row.support_macs / 1e9:.4f}",
                ref.get('params_m', '-'), ref.get('gflops', '-'),
            ])
        return tabulate(rows, headers=['escala', 'variante', 'params (M)', 'GMACs/img',
                                       'GMACs soporte', 'ref params', 'ref GFLOPs'], tablefmt='simple')


def profile_cost(config: RunConfig, output_path: Optional[str] = None) -> CostReport:
    """Informe de coste (escritorio y escala completa) en cost_report.json"""
    config.check()
    num_classes = config.data.num_classes
    rows = desk_scale_rows(config.model, num_classes, config.k) + full_scale_rows()
    report = CostReport(rows=rows, desk_dims=desk_scale_dims(config.model, num_classes, config.k))
    path = report.write(output_path or Path(config.output_dir) / 'cost_report.json')
    failed = [name for name, ok in report.orderings().items() if not ok]
    if failed:
        logger.warning(f"⚠️ Órdenes de coste no respetados: {failed}")
    logger.info(f"✅ Informe de coste escrito en {path}")
    logger.info("\n" + report.table())
    return report
