"""Tests de la exportación de mapas de atención"""

import numpy as np
import pytest
import tensorflow as tf

from core.checkpoint import save_checkpoint
from core.data_models import Mode
from core.dataset import BASE_TRAIN, TEST
from core.detector import FewShotDetector
from core.episodes import support_episode
from core.heatmaps import (
    assigned_prototype_heatmap, export_heatmaps, normalize_map, support_heatmaps, upsample_nearest,
    write_png
)
from core.runtime import stage_rng
from tests.conftest import small_model_config, small_run_config
from utils.validators import ValidationError


@pytest.mark.unit
class TestGrids:

    def test_normalize(self):
        np.testing.assert_allclose(normalize_map([1.0, 3.0, 5.0]), [0.0, 0.5, 1.0])

    def test_constant_map_is_zero(self):
        np.testing.assert_array_equal(normalize_map(np.full((2, 2), 4.0)), 0.0)

    def test_non_finite_map_raises(self):
        with pytest.raises(ValidationError):
            normalize_map([0.0, np.nan])

    def test_upsample_repeats_cells(self):
        grid = np.array([[0.0, 1.0], [0.5, 0.25]])
        np.testing.assert_array_equal(upsample_nearest(grid, 4, 4), np.kron(grid, np.ones((2, 2))))

    def test_png_round_trip(self, tmp_path):
        grid = np.array([[0.0, 1.0], [0.5, 2.0]])
        path = write_png(tmp_path / 'maps' / 'g.png', grid)
        pixels = tf.io.decode_png(tf.io.read_file(str(path))).numpy()
        assert pixels.shape == (2, 2, 1)
        assert pixels[..., 0].tolist() == [[0, 255], [128, 255]]


@pytest.mark.integration
class TestDetectorMaps:

    def _context(self, detector, dataset, store):
        episode = support_episode(dataset, BASE_TRAIN, dataset.base_class_ids, 1, np.random.default_rng(0),
                                  store, 32)
        return episode, detector.encode_supports(episode, Mode.TEST)

    def test_support_maps_per_query(self, detector, dataset, store):
        episode, _ = self._context(detector, dataset, store)
        maps = support_heatmaps(detector, episode.support_crops[0][0].image, 0)
        assert maps.shape == (3, 8, 8)
        assert maps.min() >= 0.0 and maps.max() <= 1.0

    def test_query_map_is_zero_while_alpha_is_zero(self, detector, dataset, store):
        _, context = self._context(detector, dataset, store)
        image = store.load(dataset.split_image_ids(TEST)[0])
        np.testing.assert_array_equal(assigned_prototype_heatmap(detector, image, context), 0.0)

    def test_query_map_after_alpha(self, detector, dataset, store):
        _, context = self._context(detector, dataset, store)
        detector.projection.alpha.assign(1.0)
        image = store.load(dataset.split_image_ids(TEST)[0])
        grid = assigned_prototype_heatmap(detector, image, context)
        assert grid.shape == (16, 16)
        assert grid.max() == pytest.approx(1.0)


@pytest.mark.integration
class TestExport:

    def test_export_from_checkpoint(self, tmp_path, detector, dataset):
        config = small_run_config(tmp_path, dataset.root / 'manifest.json')
        detector.projection.alpha.assign(0.5)
        checkpoint = save_checkpoint(tmp_path / 'base.zip', detector, config, 'BASE', 4, dataset.base_class_ids)

        export = export_heatmaps(config, str(checkpoint), image_ids=dataset.split_image_ids(TEST)[:2])
        assert len(export.support_files) == 4 * 2 * 3
        assert len(export.query_files) == 2
        assert all(path.exists() for path in export.files)
        assert export.output_dir == tmp_path / 'run' / 'heatmaps'

        query_png = tf.io.decode_png(tf.io.read_file(str(export.query_files[0]))).numpy()
        assert query_png.shape == (64, 64, 1)
        with np.load(export.grids_file) as grids:
            assert grids['support_c0_s0'].shape == (3, 8, 8)
            assert len([key for key in grids.files if key.startswith('query_')]) == 2

    def test_default_image_count(self, tmp_path, detector, dataset):
        config = small_run_config(tmp_path, dataset.root / 'manifest.json')
        config.eval.heatmap_images = 3
        checkpoint = save_checkpoint(tmp_path / 'base.zip', detector, config, 'BASE', 0, dataset.base_class_ids)
        export = export_heatmaps(config, str(checkpoint), output_dir=str(tmp_path / 'maps'))
        assert len(export.query_files) == 3
        assert export.grids_file == tmp_path / 'maps' / 'grids.npz'

    def test_variant_without_queries(self, tmp_path, dataset):
        config = small_run_config(tmp_path, dataset.root / 'manifest.json', variant='baseline')
        baseline = FewShotDetector(small_model_config('baseline'), dataset.base_class_ids, stage_rng(0, 'INIT'))
        checkpoint = save_checkpoint(tmp_path / 'base.zip', baseline, config, 'BASE', 0, dataset.base_class_ids)
        with pytest.raises(ValidationError):
            export_heatmaps(config, str(checkpoint))

    def test_needs_checkpoint(self, tmp_path, dataset):
        with pytest.raises(ValidationError):
            export_heatmaps(small_run_config(tmp_path, dataset.root / 'manifest.json'))
