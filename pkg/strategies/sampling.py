"""
Estrategias de emparejamiento RoI-prototipo

- BalancedClassAgnosticSampler (B-CAS): un prototipo positivo y uno
  negativo (uniforme entre las demás clases) por RoI de primer plano
- ClassSpecificSampler: solo el prototipo de la propia clase
- ClassAgnosticSampler: un prototipo uniformemente aleatorio

Las RoIs de fondo reciben background_pairs prototipos aleatorios en las
tres estrategias.
"""
from typing import List, Sequence

import numpy as np

from strategies import BaseSampler
from utils.validators import validate_and_raise


class BalancedClassAgnosticSampler(BaseSampler):
    """B-CAS: par positivo + par negativo en paralelo"""

    name = 'bcas'

    def _pairs_for_foreground(self, label: int, classes: Sequence[int],
                              rng: np.random.Generator) -> List[int]:
        others = [c for c in classes if c != label]
        validate_and_raise(bool(others), "B-CAS necesita al menos 2 clases para muestrear un negativo")
        negative = others[int(rng.integers(len(others)))]
        return [label, negative]


class ClassSpecificSampler(BaseSampler):
    """Agregación específica de clase"""

    name = 'class_specific'

    def _pairs_for_foreground(self, label: int, classes: Sequence[int],
                              rng: np.random.Generator) -> List[int]:
        return [label]


class ClassAgnosticSampler(BaseSampler):
    """Agregación agnóstica completamente aleatoria"""

    name = 'class_agnostic'

    def _pairs_for_foreground(self, label: int, classes: Sequence[int],
                              rng: np.random.Generator) -> List[int]:
        return [classes[int(rng.integers(len(classes)))]]
