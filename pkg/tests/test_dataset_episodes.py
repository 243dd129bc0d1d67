"""Tests del dataset sintético, el split K-shot y el muestreo de episodios"""

import json

import numpy as np
import pytest

from config.settings import SyntheticDataConfig
from core.data_models import ClassRole, Episode, QueryImage, SupportCrop
from core.dataset import (
    BASE_TRAIN, TEST, ClassInfo, DatasetManifest, ImageStore, finetune_split_name, generate_synthetic,
    make_kshot_split, read_manifest
)
from core.episodes import pick_roster, sample_episode, support_episode
from tests.conftest import small_data_config
from utils.validators import ValidationError


@pytest.mark.integration
class TestSyntheticGeneration:

    def test_same_seed_same_dataset(self, dataset, tmp_path):
        again = generate_synthetic(small_data_config(), seed=0, output_dir=tmp_path)
        assert again == dataset
        for record in dataset.images[:5]:
            assert (tmp_path / record.file).read_bytes() == (dataset.root / record.file).read_bytes()

    def test_other_seed_other_dataset(self, dataset, tmp_path):
        assert generate_synthetic(small_data_config(), seed=1, output_dir=tmp_path) != dataset

    def test_class_roles(self, dataset):
        assert dataset.novel_class_ids == [2, 5]
        assert dataset.base_class_ids == [0, 1, 3, 4]
        assert dataset.class_name(0) == 'square-solid'
        assert dataset.class_name(5) == 'circle-checker'

    def test_splits(self, dataset):
        test_ids = set(dataset.split_image_ids(TEST))
        train_ids = set(dataset.split_image_ids(BASE_TRAIN))
        assert len(test_ids) == 15
        assert not test_ids & train_ids
        assert all(ann.class_id in dataset.base_class_ids for _, ann in dataset.split_annotations(BASE_TRAIN))
        counts = dataset.annotation_count(TEST)
        assert sum(counts.values()) == sum(len(dataset.image(i).annotations) for i in test_ids)

    def test_boxes_inside_image(self, dataset):
        for record in dataset.images:
            for ann in record.annotations:
                x1, y1, x2, y2 = ann.box
                assert 0 <= x1 < x2 <= record.width
                assert 0 <= y1 < y2 <= record.height

    def test_manifest_round_trip(self, dataset):
        loaded = read_manifest(dataset.root / 'manifest.json')
        assert loaded == dataset
        assert loaded.root == dataset.root

    @pytest.mark.slow
    def test_class_histogram_is_uniform(self, tmp_path):
        """Cada clase aparece con frecuencia 1/c (±10 %)"""
        config = SyntheticDataConfig(num_images=1200, num_classes=3, novel_class_ids=[2],
                                     objects_per_image=(3, 3))
        manifest = generate_synthetic(config, seed=4, output_dir=tmp_path)
        labels = np.asarray([ann.class_id for record in manifest.images for ann in record.annotations])
        assert len(labels) > 3000
        counts = np.bincount(labels, minlength=3)
        expected = len(labels) / 3
        assert np.all(np.abs(counts - expected) <= 0.1 * expected)

    def test_invalid_config_raises(self, tmp_path):
        config = small_data_config()
        config.num_classes = 20
        with pytest.raises(ValidationError):
            generate_synthetic(config, seed=0, output_dir=tmp_path)


@pytest.mark.unit
class TestManifestErrors:

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            read_manifest(tmp_path / 'missing.json')

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'manifest.json'
        path.write_text('{no es json')
        with pytest.raises(ValidationError):
            read_manifest(path)

    def test_unsupported_schema(self, dataset, tmp_path):
        raw = dataset.to_dict()
        raw['schema_version'] = 2
        path = tmp_path / 'manifest.json'
        path.write_text(json.dumps(raw))
        with pytest.raises(ValidationError):
            read_manifest(path)

    def test_missing_fields(self):
        with pytest.raises(ValidationError):
            DatasetManifest.from_dict({'schema_version': 1, 'classes': [{'id': 0}], 'images': [], 'splits': {}})

    def test_duplicate_classes(self):
        classes = (ClassInfo(0, 'a', ClassRole.BASE), ClassInfo(0, 'b', ClassRole.NOVEL))
        with pytest.raises(ValidationError):
            DatasetManifest(classes=classes, images=(), splits={})

    def test_unknown_lookups(self, dataset):
        with pytest.raises(ValidationError):
            dataset.class_name(99)
        with pytest.raises(ValidationError):
            dataset.image(10_000)
        with pytest.raises(ValidationError):
            dataset.split_entries('finetune-7')


@pytest.mark.integration
class TestKShotSplit:

    @pytest.mark.parametrize('k', [1, 2, 3])
    def test_exactly_k_per_class(self, dataset, k):
        split = finetune_split_name(k)
        manifest = make_kshot_split(dataset, k, dataset.novel_class_ids, seed=0)
        assert set(manifest.annotation_count(split).values()) == {k}
        assert not dataset.has_split(split)

    def test_no_test_images_across_seeds(self, dataset):
        test_ids = set(dataset.split_image_ids(TEST))
        for seed in range(5):
            manifest = make_kshot_split(dataset, 3, dataset.novel_class_ids, seed=seed)
            assert not set(manifest.split_image_ids(finetune_split_name(3))) & test_ids

    def test_deterministic(self, dataset):
        a = make_kshot_split(dataset, 2, dataset.novel_class_ids, seed=4)
        b = make_kshot_split(dataset, 2, dataset.novel_class_ids, seed=4)
        assert a.splits['finetune-2'] == b.splits['finetune-2']

    def test_too_few_instances(self, dataset):
        with pytest.raises(ValidationError):
            make_kshot_split(dataset, 1000, dataset.novel_class_ids, seed=0)

    def test_novel_ids_must_match(self, dataset):
        with pytest.raises(ValidationError):
            make_kshot_split(dataset, 2, [2], seed=0)

    def test_non_positive_k(self, dataset):
        with pytest.raises(ValidationError):
            make_kshot_split(dataset, 0, dataset.novel_class_ids, seed=0)


@pytest.mark.integration
class TestEpisodes:

    def test_crop_shape_and_range(self, dataset, store):
        record, ann = dataset.split_annotations(BASE_TRAIN)[0]
        crop = store.crop(record.id, ann.box, 32)
        assert crop.shape == (32, 32, 3)
        assert crop.dtype == np.float32
        assert 0.0 <= crop.min() and crop.max() <= 1.0

    def test_image_cache_is_bounded(self, dataset):
        """La caché conserva como mucho max_cached_images y expulsa la menos usada"""
        store = ImageStore(dataset, max_cached_images=2)
        first, second, third = (record.id for record in dataset.images[:3])
        pixels = store.load(first)
        store.load(second)
        store.load(first)
        store.load(third)
        assert len(store) == 2
        assert store.evictions == 1
        assert store.load(first) is pixels
        store.load(second)
        assert store.evictions == 2

    def test_image_cache_size_must_be_positive(self, dataset):
        with pytest.raises(ValidationError):
            ImageStore(dataset, max_cached_images=0)

    def test_train_support_never_from_queries(self, dataset, store):
        rng = np.random.default_rng(0)
        for _ in range(10):
            episode = sample_episode(dataset, BASE_TRAIN, dataset.base_class_ids, 2, 2, rng, store, 32)
            sources = {crop.source_image_id for crops in episode.support_crops.values() for crop in crops}
            assert not sources & set(episode.query_image_ids)
            assert episode.k == 2
            assert episode.class_roster == tuple(dataset.base_class_ids)
            for query in episode.query_images:
                assert set(query.labels) <= set(episode.class_roster)

    def test_same_rng_same_episode(self, dataset, store):
        a = sample_episode(dataset, BASE_TRAIN, [0, 1], 1, 1, np.random.default_rng(5), store, 32)
        b = sample_episode(dataset, BASE_TRAIN, [0, 1], 1, 1, np.random.default_rng(5), store, 32)
        assert a.query_image_ids == b.query_image_ids
        np.testing.assert_array_equal(a.support_crops[0][0].image, b.support_crops[0][0].image)

    def test_class_absent_from_split(self, dataset, store):
        with pytest.raises(ValidationError):
            sample_episode(dataset, BASE_TRAIN, [0, 2], 1, 1, np.random.default_rng(0), store, 32)

    def test_support_episode(self, dataset, store):
        episode = support_episode(dataset, BASE_TRAIN, [3, 1], 3, np.random.default_rng(0), store, 32)
        assert episode.query_images == ()
        assert episode.class_roster == (3, 1)
        assert all(len(crops) == 3 for crops in episode.support_crops.values())

    def test_pick_roster(self):
        rng = np.random.default_rng(0)
        assert pick_roster([4, 0, 3], None, rng) == (0, 3, 4)
        assert pick_roster([4, 0, 3], 5, rng) == (0, 3, 4)
        roster = pick_roster([4, 0, 3, 1], 2, rng)
        assert len(roster) == 2
        assert list(roster) == sorted(roster)


@pytest.mark.unit
class TestEpisodeValidation:

    @staticmethod
    def _crop(class_id):
        return SupportCrop(np.zeros((4, 4, 3), dtype=np.float32), 0, class_id)

    def _query(self, labels):
        boxes = np.tile([0.0, 0.0, 2.0, 2.0], (len(labels), 1))
        return QueryImage(1, np.zeros((8, 8, 3), dtype=np.float32), boxes, tuple(labels))

    def test_valid_episode(self):
        episode = Episode((self._query([0]),), {0: (self._crop(0),), 1: (self._crop(1),)}, (0, 1))
        assert episode.k == 1
        assert episode.query_image_ids == (1,)

    def test_duplicate_roster(self):
        with pytest.raises(ValidationError):
            Episode((), {0: (self._crop(0),)}, (0, 0))

    def test_unequal_shots(self):
        with pytest.raises(ValidationError):
            Episode((), {0: (self._crop(0),), 1: (self._crop(1), self._crop(1))}, (0, 1))

    def test_crops_outside_roster(self):
        with pytest.raises(ValidationError):
            Episode((), {0: (self._crop(0),), 2: (self._crop(2),)}, (0,))

    def test_labels_outside_roster(self):
        with pytest.raises(ValidationError):
            Episode((self._query([3]),), {0: (self._crop(0),)}, (0,))

    def test_boxes_and_labels_mismatch(self):
        with pytest.raises(ValidationError):
            QueryImage(1, np.zeros((8, 8, 3)), np.zeros((2, 4)), (0,))
