"""validators.py
Validación y jerarquía de errores del detector few-shot

Proporciona:
- ValidationError / ShapeError para entradas y configuración inválidas
- NumericalError para pérdidas no finitas durante el entrenamiento
- Helpers estáticos para validar enteros, probabilidades y tensores
"""

import logging
from typing import Any, Dict, Optional, Sequence, Type

import numpy as np

logger = logging.getLogger(__name__)


class ValidationError(Exception):
    """Excepción para entradas, configuración o invariantes inválidos"""
    pass


class ShapeError(ValidationError):
    """Dimensiones incompatibles entre dos operandos"""

    def __init__(self, left_name: str, left_shape: Sequence, right_name: str,
                 right_shape: Sequence, detail: str = ""):
        self.left_name = left_name
        self.right_name = right_name
        self.left_shape = tuple(left_shape)
        self.right_shape = tuple(right_shape)
        message = (
            f"Dimensiones incompatibles: {left_name}{self.left_shape} "
            f"vs {right_name}{self.right_shape}"
        )
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NumericalError(Exception):
    """Pérdida o tensor no finito durante el entrenamiento"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Validators:
    """
    Clase estática con métodos de validación
    """

    @staticmethod
    def validate_positive_int(value: Any, name: str, min_value: int = 1) -> int:
        """
        Valida que un valor sea un entero >= min_value

        Returns:
            El valor convertido a int
        """
        is_int = isinstance(value, (int, np.integer)) and not isinstance(value, bool)
        validate_and_raise(is_int, f"{name} debe ser un entero, recibido {value!r}")
        validate_and_raise(value >= min_value, f"{name} debe ser >= {min_value}, recibido {value}")
        return int(value)

    @staticmethod
    def validate_probability(value: Any, name: str) -> float:
        """Valida que un valor esté en [0, 1]"""
        try:
            num = float(value)
        except (TypeError, ValueError):
            num = None
        validate_and_raise(num is not None, f"{name} debe ser un número válido, recibido {value!r}")
        validate_and_raise(0.0 <= num <= 1.0, f"{name} debe estar entre 0 y 1, recibido {num}")
        return num

    @staticmethod
    def validate_finite(values: Any, name: str) -> None:
        """
        Valida que un array o tensor solo contenga reales finitos

        Args:
            values: np.ndarray, tf.Tensor o cualquier cosa convertible con np.asarray
            name: Nombre del operando para el mensaje de error
        """
        array = values.numpy() if hasattr(values, 'numpy') else np.asarray(values)
        validate_and_raise(bool(np.all(np.isfinite(array))), f"{name} contiene valores no finitos")


def validate_and_raise(condition: bool, error_message: str,
                       error_cls: Type[Exception] = ValidationError):
    """
    Helper para validar y lanzar excepción si falla

    Args:
        condition: Condición que debe ser True
        error_message: Mensaje de error si falla
        error_cls: Clase de excepción a lanzar

    Raises:
        ValidationError (o error_cls): Si condition es False
    """
    if not condition:
        logger.error(f"❌ Error de validación: {error_message}")
        raise error_cls(error_message)


def check_shapes(left_name: str, left_shape: Sequence, right_name: str,
                 right_shape: Sequence, left_axis: int, right_axis: int, detail: str = ""):
    """Lanza ShapeError si left_shape[left_axis] != right_shape[right_axis]"""
    if left_shape[left_axis] != right_shape[right_axis]:
        logger.error(
            f"❌ Shape mismatch: {left_name}{tuple(left_shape)} vs {right_name}{tuple(right_shape)}"
        )
        raise ShapeError(left_name, left_shape, right_name, right_shape, detail)
