"""Fixtures compartidos: configuración mínima, dataset sintético pequeño y detector"""

import copy
import logging

import numpy as np
import pytest
import tensorflow as tf

from config.settings import BackboneConfig, ModelConfig, RPNConfig, RunConfig, SyntheticDataConfig, TrainingConfig
from core.dataset import ImageStore, generate_synthetic
from core.detector import FewShotDetector
from core.runtime import configure_determinism, stage_rng


def small_model_config(variant: str = 'full', dtype: str = 'float32') -> ModelConfig:
    """Detector de juguete: d=8, mapas de consulta 16x16 y de soporte 8x8"""
    return ModelConfig(
        backbone=BackboneConfig(
            mid_stage_spec=[(8, 2), (8, 2)],
            high_stage_spec=[(16, 2)],
            input_size=(64, 64),
            support_size=32,
        ),
        rpn=RPNConfig(
            pre_nms_train=100, post_nms_train=16, pre_nms_test=100, post_nms_test=16,
            anchor_batch_size=32, roi_batch_size=16,
        ),
        n_queries=3,
        roi_crop_size=4,
        variant=variant,
        dtype=dtype,
    )


def small_data_config() -> SyntheticDataConfig:
    return SyntheticDataConfig(num_images=60, num_classes=6, novel_class_ids=[2, 5], test_fraction=0.25)


def small_run_config(tmp_path, manifest_path, variant: str = 'full') -> RunConfig:
    return RunConfig(
        manifest_path=str(manifest_path),
        output_dir=str(tmp_path / 'run'),
        k=2,
        seed=0,
        seeds=[0],
        model=small_model_config(variant),
        training=TrainingConfig(
            base_iterations=4, finetune_iterations=2, checkpoint_interval=2,
            queries_per_episode=1, learning_rate=0.005, finetune_learning_rate=0.002,
        ),
        data=small_data_config(),
    ).check()


@pytest.fixture(scope='session', autouse=True)
def deterministic_runtime():
    configure_determinism(0)


@pytest.fixture(scope='session')
def dataset(tmp_path_factory):
    """Dataset sintético compartido (solo lectura: no añadir splits)"""
    root = tmp_path_factory.mktemp('synthetic')
    manifest = generate_synthetic(small_data_config(), seed=0, output_dir=root)
    return manifest


@pytest.fixture
def fresh_dataset(tmp_path):
    """Dataset propio del test (se puede modificar)"""
    return generate_synthetic(small_data_config(), seed=0, output_dir=tmp_path / 'data')


@pytest.fixture(scope='session')
def store(dataset):
    return ImageStore(dataset)


@pytest.fixture
def model_config():
    return copy.deepcopy(small_model_config())


@pytest.fixture
def detector(dataset, model_config):
    return FewShotDetector(model_config, dataset.base_class_ids, stage_rng(0, 'INIT'))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def restore_root_logger():
    """setup_logger reemplaza los handlers del logger raíz"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def as_f64(values) -> tf.Tensor:
    return tf.constant(np.asarray(values, dtype=np.float64))
