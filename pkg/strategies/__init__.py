"""Estrategias de emparejamiento RoI-prototipo para la agregación de alto nivel"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Type

import numpy as np

from core.data_models import BACKGROUND, ClassPrototype, RoIFeature
from utils.validators import validate_and_raise


class Polarity(Enum):
    """Relación entre la clase de la RoI y la del prototipo"""
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


@dataclass(frozen=True)
class SamplePair:
    """Par (RoI, prototipo) que entra en la fusión

    target_label es la clase de la RoI para pares POSITIVE y BACKGROUND
    para pares NEGATIVE.
    """
    roi: RoIFeature
    prototype: ClassPrototype
    polarity: Polarity
    target_label: int

    def __post_init__(self):
        matches = self.prototype.label == self.roi.label
        validate_and_raise(matches or self.polarity != Polarity.POSITIVE,
                           "Un par POSITIVE necesita el prototipo de la clase de la RoI")
        validate_and_raise(not matches or self.polarity != Polarity.NEGATIVE,
                           "Un par NEGATIVE necesita un prototipo de otra clase")


@dataclass(frozen=True)
class PairPlan:
    """Plan de emparejamiento por índices (lo que consume el detector)"""
    roi_index: np.ndarray
    prototype_class: np.ndarray
    positive: np.ndarray
    target_label: np.ndarray

    def __len__(self) -> int:
        return len(self.roi_index)

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.positive))

    @property
    def num_negative(self) -> int:
        return len(self) - self.num_positive


class BaseSampler(ABC):
    """Clase base abstracta para las estrategias de emparejamiento"""

    name = 'base'

    def __init__(self, background_pairs: int = 1):
        self.background_pairs = background_pairs
        self.logger = logging.getLogger(f"strategy.{self.name}")

    @abstractmethod
    def _pairs_for_foreground(self, label: int, classes: Sequence[int],
                              rng: np.random.Generator) -> List[int]:
        """Clases de prototipo con las que se empareja una RoI de primer plano"""
        pass

    def plan(self, labels: np.ndarray, classes: Sequence[int], rng: np.random.Generator) -> PairPlan:
        """
        Construye el plan de pares para un lote de RoIs

        Args:
            labels: Clase asignada a cada RoI (BACKGROUND para fondo)
            classes: Clases con prototipo disponible, en orden fijo
            rng: Generador propiedad del llamador (sin estado global)
        """
        classes = [int(c) for c in classes]
        validate_and_raise(bool(classes), "No hay prototipos de clase para emparejar")
        class_set = set(classes)

        roi_index, proto_class, positive, target = [], [], [], []
        for i, label in enumerate(np.asarray(labels, dtype=np.int64).tolist()):
            if label == BACKGROUND:
                for _ in range(self.background_pairs):
                    roi_index.append(i)
                    proto_class.append(classes[int(rng.integers(len(classes)))])
                    positive.append(False)
                    target.append(BACKGROUND)
                continue
            validate_and_raise(label in class_set,
                               f"La RoI {i} es de la clase {label}, que no tiene prototipo")
            for chosen in self._pairs_for_foreground(label, classes, rng):
                is_positive = chosen == label
                roi_index.append(i)
                proto_class.append(chosen)
                positive.append(is_positive)
                target.append(label if is_positive else BACKGROUND)

        plan = PairPlan(
            roi_index=np.asarray(roi_index, dtype=np.int64),
            prototype_class=np.asarray(proto_class, dtype=np.int64),
            positive=np.asarray(positive, dtype=bool),
            target_label=np.asarray(target, dtype=np.int64),
        )
        self.logger.debug(
            f"{len(plan)} pares para {len(labels)} RoIs "
            f"({plan.num_positive} positivos, {plan.num_negative} negativos)"
        )
        return plan

    def sample(self, rois: Sequence[RoIFeature], prototypes: Mapping[int, ClassPrototype],
               rng: np.random.Generator) -> List[SamplePair]:
        """Versión orientada a objetos de plan()"""
        classes = sorted(prototypes)
        labels = np.asarray([roi.label for roi in rois], dtype=np.int64)
        plan = self.plan(labels, classes, rng)
        pairs = []
        for i, proto_class, is_positive, target in zip(plan.roi_index, plan.prototype_class,
                                                       plan.positive, plan.target_label):
            pairs.append(SamplePair(
                roi=rois[int(i)],
                prototype=prototypes[int(proto_class)],
                polarity=Polarity.POSITIVE if is_positive else Polarity.NEGATIVE,
                target_label=int(target),
            ))
        return pairs


from .sampling import BalancedClassAgnosticSampler, ClassAgnosticSampler, ClassSpecificSampler  # noqa: E402

SAMPLERS: Dict[str, Type[BaseSampler]] = {
    'bcas': BalancedClassAgnosticSampler,
    'class_specific': ClassSpecificSampler,
    'class_agnostic': ClassAgnosticSampler,
}


def build_sampler(name: str, background_pairs: int = 1) -> BaseSampler:
    validate_and_raise(name in SAMPLERS, f"Estrategia de emparejamiento desconocida: {name}")
    return SAMPLERS[name](background_pairs=background_pairs)


def bcas_sample(rois: Sequence[RoIFeature], prototypes: Mapping[int, ClassPrototype],
                rng: np.random.Generator, background_pairs: int = 1) -> List[SamplePair]:
    """Un par POSITIVE y uno NEGATIVE por RoI de primer plano"""
    return BalancedClassAgnosticSampler(background_pairs).sample(rois, prototypes, rng)


def class_specific_sample(rois: Sequence[RoIFeature], prototypes: Mapping[int, ClassPrototype],
                          rng: np.random.Generator, background_pairs: int = 1) -> List[SamplePair]:
    """Cada RoI de primer plano solo con el prototipo de su clase"""
    return ClassSpecificSampler(background_pairs).sample(rois, prototypes, rng)


def class_agnostic_sample(rois: Sequence[RoIFeature], prototypes: Mapping[int, ClassPrototype],
                          rng: np.random.Generator, background_pairs: int = 1) -> List[SamplePair]:
    """Cada RoI con un prototipo uniformemente aleatorio"""
    return ClassAgnosticSampler(background_pairs).sample(rois, prototypes, rng)


__all__ = [
    'Polarity', 'SamplePair', 'PairPlan', 'BaseSampler', 'SAMPLERS', 'build_sampler',
    'BalancedClassAgnosticSampler', 'ClassSpecificSampler', 'ClassAgnosticSampler',
    'bcas_sample', 'class_specific_sample', 'class_agnostic_sample',
]
