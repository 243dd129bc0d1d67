"""Tests del backbone compartido por consulta y soporte"""

import numpy as np
import pytest

from core.backbone import Backbone, pooled_high, stack_images
from core.runtime import stage_rng
from tests.conftest import small_model_config
from utils.validators import ValidationError

pytestmark = pytest.mark.unit


@pytest.fixture
def backbone():
    return Backbone(small_model_config().backbone, stage_rng(0, 'INIT'))


def random_image(rng, size):
    return rng.uniform(size=(size, size, 3)).astype(np.float32)


class TestShapes:

    def test_mid_stride_and_channels(self, backbone, rng):
        config = backbone.config
        assert config.mid_stride == 4
        query = backbone.extract_mid(random_image(rng, 64))
        support = backbone.extract_mid(random_image(rng, config.support_size))
        assert (query.height, query.width, query.channels) == (16, 16, backbone.d)
        assert (support.height, support.width, support.channels) == (8, 8, backbone.d)
        assert (query.height, query.width) == config.mid_output_hw(64, 64)

    def test_high_stage_doubles_channels(self, backbone, rng):
        high = backbone.extract_high(backbone.extract_mid(random_image(rng, 64)))
        assert (high.height, high.width, high.channels) == (8, 8, 2 * backbone.d)

    def test_unexpected_size_raises(self, backbone, rng):
        with pytest.raises(ValidationError):
            backbone.extract_mid(random_image(rng, 48))


class TestSiameseWeights:
    """Una sola instancia de pesos para ambas ramas"""

    def test_support_batch_matches_single_extraction(self, backbone, rng):
        crops = [random_image(rng, 32) for _ in range(3)]
        batched = backbone.mid_batch(stack_images(crops)).numpy()
        for i, crop in enumerate(crops):
            np.testing.assert_allclose(backbone.extract_mid(crop).values.numpy(), batched[i], atol=1e-6)

    def test_same_image_same_features_in_both_branches(self, detector, rng):
        image = random_image(rng, 32)
        query_side = detector.extract_mid(image).values.numpy()
        support_side = detector.backbone.mid_batch(stack_images([image])).numpy()[0]
        np.testing.assert_allclose(query_side, support_side, atol=1e-6)
        pooled = pooled_high(detector.backbone, support_side[np.newaxis]).numpy()
        assert pooled.shape == (1, 2 * detector.backbone.d)

    def test_single_set_of_backbone_variables(self, detector):
        names = [n for n in detector.named_variables() if n.startswith('backbone/')]
        assert sorted(names) == sorted(f'backbone/{n}' for n in detector.backbone.named_variables())
        assert len(names) == 2 * len(detector.backbone.stages)
