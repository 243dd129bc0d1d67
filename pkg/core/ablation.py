"""ablation.py
Ablación de componentes sobre el benchmark sintético

Para cada semilla: genera el dataset, y para cada variante entrena la etapa
base, hace fine-tuning K-shot y evalúa. El resumen (mediana por variante del
AP50 novel y total) se escribe en ablation.json junto con la comprobación del
orden esperado: full >= bcas+nlf >= bcas >= baseline.

Opcionalmente:
- include_dense añade la variante dense-match para compararla con full
- query_counts barre el número de feature queries n en las variantes con FFA
"""

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from tabulate import tabulate

from config.settings import VARIANTS, RunConfig
from core.dataset import generate_synthetic
from core.evaluator import evaluate
from core.trainer import finetune_novel, train_base
from utils.logger import LoggerContext
from utils.validators import Validators, validate_and_raise

logger = logging.getLogger(__name__)

ABLATION_ORDER = ('baseline', 'bcas', 'bcas+nlf', 'full')
DENSE_VARIANT = 'dense-match'
MIN_FULL_MARGIN = 0.02


@dataclass
class AblationResult:
    """Resultados por semilla y resumen por variante

    runs lleva una columna n_queries; las medianas por variante solo usan las
    ejecuciones con reference_queries (el n de la configuración).
    """
    runs: pd.DataFrame
    k: int
    reference_queries: Optional[int] = None

    @property
    def _reference_runs(self) -> pd.DataFrame:
        if self.reference_queries is None or 'n_queries' not in self.runs:
            return self.runs
        return self.runs[self.runs['n_queries'] == self.reference_queries]

    @property
    def medians(self) -> pd.DataFrame:
        return self._reference_runs.groupby('variant')[['novel_ap50', 'all_ap50']].median()

    def ordering_holds(self) -> bool:
        medians = self.medians['novel_ap50']
        present = [v for v in ABLATION_ORDER if v in medians.index]
        return all(medians[a] <= medians[b] for a, b in zip(present, present[1:]))

    def full_margin(self) -> Optional[float]:
        medians = self.medians['novel_ap50']
        if 'full' not in medians.index or 'baseline' not in medians.index:
            return None
        return float(medians['full'] - medians['baseline'])

    def dense_comparison(self) -> Optional[Dict[str, float]]:
        """Mediana del AP50 novel de full frente a dense-match (None si falta alguna)"""
        medians = self.medians['novel_ap50']
        if 'full' not in medians.index or DENSE_VARIANT not in medians.index:
            return None
        return {'full': float(medians['full']), DENSE_VARIANT: float(medians[DENSE_VARIANT])}

    def query_sweep(self) -> Dict[str, Dict[int, float]]:
        """variante -> {n: mediana del AP50 novel} para las variantes con más de un n"""
        if 'n_queries' not in self.runs:
            return {}
        sweep = {}
        for variant, group in self.runs.groupby('variant'):
            medians = group.groupby('n_queries')['novel_ap50'].median()
            if len(medians) > 1:
                sweep[variant] = {int(n): float(value) for n, value in medians.sort_index().items()}
        return sweep

    def to_dict(self) -> Dict:
        medians = self.medians
        margin = self.full_margin()
        sort_keys = [key for key in ('variant', 'n_queries', 'seed') if key in self.runs]
        return {
            'k': self.k,
            'runs': [
                {key: (float(v) if isinstance(v, float) else v) for key, v in row.items()}
                for row in self.runs.sort_values(sort_keys).to_dict(orient='records')
            ],
            'median': {
                variant: {'novel_ap50': float(row['novel_ap50']), 'all_ap50': float(row['all_ap50'])}
                for variant, row in medians.sort_index().iterrows()
            },
            'ordering': list(ABLATION_ORDER),
            'ordering_holds': self.ordering_holds(),
            'full_minus_baseline': margin,
            'full_margin_met': margin is not None and margin >= MIN_FULL_MARGIN,
            'dense_comparison': self.dense_comparison(),
            'query_sweep': {
                variant: {str(n): value for n, value in values.items()}
                for variant, values in self.query_sweep().items()
            },
        }

    def table(self) -> str:
        rows = [
            [variant, f"{row['novel_ap50']:.4f}", f"{row['all_ap50']:.4f}"]
            for variant, row in self.medians.iterrows()
        ]
        text = tabulate(rows, headers=['variante', 'AP50 novel (mediana)', 'AP50 total (mediana)'],
                        tablefmt='simple')
        sweep = self.query_sweep()
        if sweep:
            sweep_rows = [[variant, n, f"{value:.4f}"] for variant, values in sweep.items()
                          for n, value in values.items()]
            text += "\n\n" + tabulate(sweep_rows, headers=['variante', 'n', 'AP50 novel (mediana)'],
                                      tablefmt='simple')
        return text


def _variant_config(config: RunConfig, variant: str, seed: int, root: Path, manifest_path: Path,
                    n_queries: Optional[int] = None) -> RunConfig:
    run = copy.deepcopy(config)
    run.model.variant = variant
    run.seed = seed
    run.manifest_path = str(manifest_path)
    name = variant
    if n_queries is not None and n_queries != config.model.n_queries:
        run.model.n_queries = n_queries
        name = f'{variant}-n{n_queries}'
    run.output_dir = str(root / f'seed{seed}' / name)
    run.stage = 'BASE'
    run.base_checkpoint = None
    run.checkpoint = None
    return run


def _plan_runs(config: RunConfig, variants: Sequence[str],
               query_counts: Sequence[int]) -> List[Tuple[str, int]]:
    """Pares (variante, n) a ejecutar por semilla; el barrido de n solo afecta a FFA"""
    default = config.model.n_queries
    plan = [(variant, default) for variant in variants]
    for variant in variants:
        if VARIANTS[variant].aggregation != 'ffa':
            continue
        plan += [(variant, n) for n in sorted(set(query_counts)) if n != default]
    return plan


def run_ablation(config: RunConfig, variants: Sequence[str] = ABLATION_ORDER,
                 seeds: Optional[Sequence[int]] = None, include_dense: bool = False,
                 query_counts: Sequence[int] = ()) -> AblationResult:
    """
    Ejecuta la ablación completa

    Args:
        config: Configuración base (output_dir es la raíz de la ablación)
        variants: Variantes a comparar
        seeds: Semillas (por defecto config.seeds)
        include_dense: Añade dense-match para la comparación con full
        query_counts: Valores de n a barrer en las variantes con FFA

    Raises:
        ValidationError: Variante desconocida, sin semillas o n no positivo
    """
    variants = list(variants)
    if include_dense and DENSE_VARIANT not in variants:
        variants.append(DENSE_VARIANT)
    unknown = [v for v in variants if v not in VARIANTS]
    validate_and_raise(not unknown, f"Variantes desconocidas: {unknown}")
    seeds = list(seeds if seeds is not None else config.seeds)
    validate_and_raise(bool(seeds), "La ablación necesita al menos una semilla")
    query_counts = [Validators.validate_positive_int(n, 'n_queries') for n in query_counts]
    plan = _plan_runs(config, variants, query_counts)

    root = Path(config.output_dir)
    records: List[Dict] = []
    for seed in seeds:
        data_dir = root / f'seed{seed}' / 'data'
        generate_synthetic(config.data, seed, data_dir)
        manifest_path = data_dir / 'manifest.json'

        for variant, n_queries in plan:
            run = _variant_config(config, variant, seed, root, manifest_path, n_queries)
            with LoggerContext(logger, variant=variant, seed=seed):
                logger.info(f"Ablación: variante {variant}, n={n_queries}, semilla {seed}")
                base = train_base(run)
                tuned = finetune_novel(run, str(base.checkpoint_path))
                report = evaluate(run, str(tuned.checkpoint_path))
            records.append({
                'variant': variant,
                'seed': int(seed),
                'n_queries': int(n_queries),
                'novel_ap50': report.novel_map if report.novel_map is not None else 0.0,
                'all_ap50': report.all_map if report.all_map is not None else 0.0,
                'base_final_loss': base.last_total,
                'finetune_final_loss': tuned.last_total,
            })

    result = AblationResult(runs=pd.DataFrame.from_records(records), k=config.k,
                            reference_queries=config.model.n_queries)
    path = root / 'ablation.json'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2) + '\n', encoding='utf-8')

    if result.ordering_holds():
        logger.info("✅ Orden de la ablación respetado")
    else:
        logger.warning("⚠️ El orden de la ablación no se cumple en las medianas")
    comparison = result.dense_comparison()
    if comparison is not None:
        logger.info(f"FFA frente a emparejamiento denso (AP50 novel): {comparison}")
    logger.info("\n" + result.table())
    return result
