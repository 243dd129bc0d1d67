#!/usr/bin/env python3
"""Detector few-shot con prototipos de grano fino - CLI

Subcomandos:
- generate-data     Dataset sintético de glifos + manifiesto
- train-base        Entrenamiento base sobre las clases base
- finetune          Transferencia de queries + fine-tuning K-shot
- evaluate          AP50 sobre el split de test
- export-heatmaps   Mapas de atención de soporte y consulta
- profile           Informe analítico de parámetros y MACs
- ablate            Ablación de componentes (varias semillas)

Códigos de salida: 0 éxito, 2 error de validación, 3 fallo numérico.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, Optional

from config.settings import VARIANTS, RunConfig, load_config
from utils.logger import setup_logger
from utils.validators import NumericalError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Parser con los flags comunes en todos los subcomandos"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='Fichero YAML de configuración')
    common.add_argument('--seed', type=int, default=None, help='Semilla de la ejecución')
    common.add_argument('--out', default=None, help='Directorio de salida')
    common.add_argument('--checkpoint', default=None, help='Checkpoint de entrada')
    common.add_argument('--k', type=int, default=None, help='Shots por clase (K)')
    common.add_argument('--variant', choices=sorted(VARIANTS), default=None, help='Variante del detector')
    common.add_argument('--manifest', default=None, help='Ruta del manifiesto del dataset')

    parser = argparse.ArgumentParser(description='Detector few-shot con prototipos de grano fino')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('generate-data', parents=[common], help='Genera el dataset sintético')
    train = sub.add_parser('train-base', parents=[common], help='Entrenamiento base')
    train.add_argument('--resume', default=None, help='Checkpoint intermedio desde el que reanudar')
    sub.add_parser('finetune', parents=[common], help='Fine-tuning K-shot (--checkpoint = checkpoint base)')
    sub.add_parser('evaluate', parents=[common], help='Evaluación AP50')
    heatmaps = sub.add_parser('export-heatmaps', parents=[common], help='Exporta mapas de atención')
    heatmaps.add_argument('--images', type=int, nargs='*', default=None, help='IDs de imágenes de test')
    sub.add_parser('profile', parents=[common], help='Informe de coste')
    ablate = sub.add_parser('ablate', parents=[common], help='Ablación de componentes')
    ablate.add_argument('--seeds', type=int, nargs='+', default=None, help='Semillas de la ablación')
    ablate.add_argument('--dense', action='store_true', help='Incluye dense-match para compararlo con full')
    ablate.add_argument('--n-queries', type=int, nargs='+', default=(), dest='n_queries',
                        help='Valores de n (feature queries) a barrer en las variantes con FFA')
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Optional[object]]:
    overrides = {
        'seed': args.seed,
        'output_dir': args.out,
        'k': args.k,
        'variant': args.variant,
        'manifest_path': args.manifest,
    }
    if args.command == 'finetune':
        overrides.update(stage='FINETUNE', base_checkpoint=args.checkpoint)
    elif args.command in ('evaluate', 'export-heatmaps'):
        overrides.update(stage='EVAL', checkpoint=args.checkpoint)
    if args.command == 'ablate' and args.seeds:
        overrides['seeds'] = list(args.seeds)
    return overrides


def run_command(args: argparse.Namespace, config: RunConfig) -> int:
    """Ejecuta el subcomando ya configurado"""
    from core.runtime import configure_determinism
    configure_determinism(config.seed)

    if args.command == 'generate-data':
        from core.dataset import generate_synthetic
        output_dir = args.out or config.data.output_dir
        generate_synthetic(config.data, config.seed, output_dir)
        logger.info(f"Manifiesto: {Path(output_dir) / 'manifest.json'}")
    elif args.command == 'train-base':
        from core.trainer import train_base
        result = train_base(config, resume_from=args.resume)
        logger.info(f"Checkpoint base: {result.checkpoint_path}")
    elif args.command == 'finetune':
        from core.trainer import finetune_novel
        result = finetune_novel(config, config.base_checkpoint)
        logger.info(f"Checkpoint K={config.k}: {result.checkpoint_path}")
    elif args.command == 'evaluate':
        from core.evaluator import evaluate
        evaluate(config, config.checkpoint)
    elif args.command == 'export-heatmaps':
        from core.heatmaps import export_heatmaps
        export_heatmaps(config, config.checkpoint, image_ids=args.images)
    elif args.command == 'profile':
        from core.profiler import profile_cost
        profile_cost(config)
    elif args.command == 'ablate':
        from core.ablation import run_ablation
        run_ablation(config, include_dense=args.dense, query_counts=args.n_queries)
    return EXIT_OK


def main(argv=None) -> int:
    """Función principal; devuelve el código de salida"""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, overrides_from_args(args))
    except ValidationError as e:
        print(f"❌ Configuración inválida: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    setup_logger(
        log_level=config.log_level,
        log_dir=str(Path(config.output_dir) / 'logs'),
        json_format=config.log_format == 'json',
    )
    logger.info(f"🚀 {args.command}\n{config.describe()}")

    try:
        return run_command(args, config)
    except ValidationError as e:
        logger.error(f"❌ Error de validación: {e}")
        return EXIT_VALIDATION
    except NumericalError as e:
        logger.error(f"❌ Fallo numérico: {e} (diagnóstico en {Path(config.output_dir) / 'nan_dump.json'})")
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        logger.info("⚠️ Interrumpido por el usuario")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
