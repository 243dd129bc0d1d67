"""Utilidades comunes: logging, validación y métricas"""
from .logger import setup_logger, log_iteration, LoggerContext
from .validators import ValidationError, ShapeError, NumericalError, Validators, validate_and_raise
from .metrics_log import MetricsWriter, read_metrics

__all__ = [
    'setup_logger', 'log_iteration', 'LoggerContext',
    'ValidationError', 'ShapeError', 'NumericalError', 'Validators', 'validate_and_raise',
    'MetricsWriter', 'read_metrics'
]
