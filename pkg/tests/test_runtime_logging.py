"""Tests de determinismo, logging estructurado y métricas por iteración"""

import json
import logging
import sys

import numpy as np
import pytest
import tensorflow as tf

from core.runtime import STAGE_CODES, configure_determinism, stage_rng
from strategies import build_sampler
from utils.logger import CustomJsonFormatter, LoggerContext, log_iteration, setup_logger
from utils.metrics_log import MetricsWriter, read_metrics, truncate_metrics
from utils.validators import (
    NumericalError, ShapeError, ValidationError, Validators, check_shapes, validate_and_raise
)

pytestmark = pytest.mark.unit


class TestStageRng:

    def test_same_key_same_stream(self):
        assert stage_rng(3, 'BASE', 7).integers(1 << 30, size=5).tolist() == \
            stage_rng(3, 'BASE', 7).integers(1 << 30, size=5).tolist()

    def test_streams_are_independent(self):
        draws = {
            key: stage_rng(*key).integers(1 << 30, size=4).tolist()
            for key in [(0, 'BASE', 0), (0, 'BASE', 1), (0, 'FINETUNE', 0), (1, 'BASE', 0)]
        }
        assert len({tuple(v) for v in draws.values()}) == 4

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            stage_rng(0, 'TRAIN')

    def test_stage_codes_are_unique(self):
        assert len(set(STAGE_CODES.values())) == len(STAGE_CODES)

    def test_configure_determinism_is_repeatable(self):
        configure_determinism(5)
        a = tf.random.uniform((3,)).numpy()
        configure_determinism(5)
        b = tf.random.uniform((3,)).numpy()
        np.testing.assert_array_equal(a, b)


class TestMetrics:

    def test_write_and_read(self, tmp_path):
        path = tmp_path / 'metrics' / 'base.jsonl'
        with MetricsWriter(path) as writer:
            for it in range(3):
                writer.write({'iteration': it, 'total': 1.0 / (it + 1), 'stage': 'BASE'})
        assert writer.rows_written == 3
        first = path.read_text().splitlines()[0]
        assert list(json.loads(first)) == ['iteration', 'stage', 'total']
        frame = read_metrics(path)
        assert len(frame) == 3
        assert frame['iteration'].tolist() == [0, 1, 2]

    def test_append_after_truncate(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        with MetricsWriter(path) as writer:
            for it in range(4):
                writer.write({'iteration': it})
        kept = truncate_metrics(path, 2)
        assert len(kept) == 2
        with MetricsWriter(path, append=True) as writer:
            writer.write({'iteration': 2})
        assert read_metrics(path)['iteration'].tolist() == [0, 1, 2]

    def test_missing_file(self, tmp_path):
        assert read_metrics(tmp_path / 'none.jsonl').empty
        assert truncate_metrics(tmp_path / 'none.jsonl', 3) == []


class TestLogging:

    def test_json_formatter_includes_context(self):
        record = logging.LogRecord('fpd.test', logging.INFO, __file__, 10, 'hola %s', ('mundo',), None)
        record.stage = 'BASE'
        record.iteration = 3
        data = json.loads(CustomJsonFormatter().format(record))
        assert data['message'] == 'hola mundo'
        assert data['level'] == 'INFO'
        assert data['stage'] == 'BASE'
        assert data['iteration'] == 3
        assert 'variant' not in data

    def test_json_formatter_exception(self):
        try:
            raise RuntimeError('fallo')
        except RuntimeError:
            record = logging.LogRecord('fpd.test', logging.ERROR, __file__, 1, 'error', (), sys.exc_info())
        assert 'RuntimeError' in json.loads(CustomJsonFormatter().format(record))['exception']

    def test_log_iteration(self, caplog):
        logger = logging.getLogger('fpd.test')
        with caplog.at_level(logging.INFO):
            log_iteration(logger, 'BASE', 5, {'total': 1.5, 'meta': 0.25}, episode_seed=9)
        record = caplog.records[-1]
        assert record.stage == 'BASE'
        assert record.iteration == 5
        assert record.episode_seed == 9
        assert 'meta=0.2500 total=1.5000' in record.getMessage()

    def test_logger_context(self, caplog):
        logger = logging.getLogger('fpd.test')
        with caplog.at_level(logging.INFO):
            with LoggerContext(logger, variant='full'):
                logger.info('dentro')
            logger.info('fuera')
        inside, outside = caplog.records[-2:]
        assert inside.variant == 'full'
        assert not hasattr(outside, 'variant')

    def test_setup_logger_json_file(self, tmp_path, restore_root_logger):
        logger = setup_logger('fpd-test', 'DEBUG', str(tmp_path), console_output=False, json_format=True)
        logging.getLogger('core.trainer').info('iteración lista', extra={'stage': 'FINETUNE'})
        for handler in logger.handlers:
            handler.flush()
        lines = (tmp_path / 'fpd-test.log').read_text(encoding='utf-8').splitlines()
        last = json.loads(lines[-1])
        assert last['message'] == 'iteración lista'
        assert last['stage'] == 'FINETUNE'
        assert (tmp_path / 'fpd-test_errors.log').exists()


class TestValidators:

    def test_positive_int(self):
        assert Validators.validate_positive_int(np.int64(3), 'K') == 3
        for bad in (0, 2.5, True, '3'):
            with pytest.raises(ValidationError):
                Validators.validate_positive_int(bad, 'K')

    def test_probability_and_finite(self):
        assert Validators.validate_probability('0.5', 'p') == 0.5
        with pytest.raises(ValidationError):
            Validators.validate_probability(1.5, 'p')
        with pytest.raises(ValidationError):
            Validators.validate_finite(np.array([1.0, np.inf]), 'x')

    def test_shape_error_is_validation_error(self):
        with pytest.raises(ValidationError) as info:
            check_shapes('A', (2, 3), 'B', (4, 5), 1, 0, 'columnas')
        assert isinstance(info.value, ShapeError)
        assert info.value.left_shape == (2, 3)
        assert 'columnas' in str(info.value)

    def test_validate_and_raise(self):
        validate_and_raise(True, 'ok')
        with pytest.raises(NumericalError):
            validate_and_raise(False, 'pérdida NaN', NumericalError)

    def test_failed_checks_are_logged(self, caplog):
        """Los helpers y las precondiciones del paquete registran el error antes de lanzar"""
        with caplog.at_level(logging.ERROR, logger='utils.validators'):
            with pytest.raises(ValidationError):
                Validators.validate_probability('x', 'p')
            with pytest.raises(ValidationError):
                build_sampler('hard_negative')
        messages = [record.getMessage() for record in caplog.records]
        assert any("p debe ser un número válido" in m for m in messages)
        assert any('hard_negative' in m for m in messages)

    def test_numerical_error_diagnostics(self):
        error = NumericalError('NaN', {'iteration': 3})
        assert error.diagnostics == {'iteration': 3}
        assert NumericalError('NaN').diagnostics == {}
