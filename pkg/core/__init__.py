"""Núcleo del detector: agregación, transferencia, fusión, detector y harness"""

from .data_models import (
    BACKGROUND, ClassPrototype, Detection, Episode, FeatureMap, FeatureQuerySet, Mode,
    PrototypeBank, PrototypeSet, ProjectionParams, QueryImage, RoIFeature, SupportCrop
)
from .detector import FewShotDetector

__all__ = [
    'BACKGROUND', 'ClassPrototype', 'Detection', 'Episode', 'FeatureMap', 'FeatureQuerySet', 'Mode',
    'PrototypeBank', 'PrototypeSet', 'ProjectionParams', 'QueryImage', 'RoIFeature', 'SupportCrop',
    'FewShotDetector'
]
