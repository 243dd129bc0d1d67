"""Configuración del detector"""
from .settings import (
    RunConfig, ModelConfig, BackboneConfig, RPNConfig, TrainingConfig,
    SyntheticDataConfig, EvalConfig, VariantSpec, VARIANTS, load_config, config_from_dict
)

__all__ = [
    'RunConfig', 'ModelConfig', 'BackboneConfig', 'RPNConfig', 'TrainingConfig',
    'SyntheticDataConfig', 'EvalConfig', 'VariantSpec', 'VARIANTS', 'load_config', 'config_from_dict'
]
