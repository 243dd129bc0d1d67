"""Tests de la transferencia de feature queries y de la integración entre shots"""

import numpy as np
import pytest
import tensorflow as tf

from core.data_models import FeatureMap, FeatureQuerySet, PrototypeSet, ProjectionParams
from core.query_transfer import (
    CompatibilityReport, compatibility, default_topk, integrate_shots, merge_reports,
    select_and_duplicate, selected_rows, shot_weights
)
from tests.conftest import as_f64
from tests.oracles import brute_select_rows, brute_topk_weights, naive_integrate
from utils.validators import ShapeError, ValidationError

pytestmark = pytest.mark.unit


def identity_params(d: int, class_ids=(0,)) -> ProjectionParams:
    params = ProjectionParams(d, d, 1, class_ids, np.random.default_rng(0), dtype=tf.float64)
    params.W.assign(np.eye(d))
    return params


def random_setup(rng, classes=(0, 1, 2), n=3, d=4, hw=(3, 3)):
    params = ProjectionParams(d, d, 2, classes, rng, dtype=tf.float64)
    base = [FeatureQuerySet.initialize(c, n, d, rng, tf.float64) for c in classes]
    support = FeatureMap(as_f64(rng.normal(size=(hw[0], hw[1], d))))
    return params, base, support


class TestCompatibility:
    """Puntuaciones de compatibilidad y pesos top-k"""

    def test_worked_example(self):
        params = identity_params(3)
        support = FeatureMap(as_f64(np.eye(3).reshape(1, 3, 3)))
        queries = FeatureQuerySet(0, tf.Variable(as_f64([[3.0, 1.0, 2.0]])))
        report = compatibility([queries], support, params, k=2)
        np.testing.assert_array_equal(report.scores, [[3.0, 1.0, 2.0]])
        np.testing.assert_array_equal(report.topk_values, [[3.0, 2.0]])
        assert report.per_query_weight[0] == 5.0

    def test_weights_match_brute_force_exactly(self, rng):
        for _ in range(50):
            params, base, support = random_setup(rng, hw=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
            hw = support.height * support.width
            k = int(rng.integers(1, hw + 1))
            report = compatibility(base, support, params, k)
            np.testing.assert_array_equal(report.per_query_weight, brute_topk_weights(report.scores, k))

    def test_source_classes_follow_stacking_order(self, rng):
        params, base, support = random_setup(rng, classes=(3, 1), n=2)
        report = compatibility(base, support, params)
        assert report.source_class_of_query == (3, 3, 1, 1)
        assert report.scores.shape == (4, 9)

    def test_default_topk(self, rng):
        assert default_topk(1) == 1
        assert default_topk(3) == 1
        assert default_topk(64) == 16
        assert default_topk(196) == 49
        params, base, support = random_setup(rng, hw=(4, 4))
        assert compatibility(base, support, params).topk_values.shape[1] == 4

    @pytest.mark.parametrize('factor', [0.37, 2.0, 11.5])
    def test_ranking_invariant_to_positive_support_scaling(self, rng, factor):
        """Escalar el soporte por c > 0 escala los pesos y conserva el orden"""
        for _ in range(20):
            params, base, support = random_setup(rng)
            scaled = FeatureMap(support.values * factor)
            original = compatibility(base, support, params, 3)
            rescaled = compatibility(base, scaled, params, 3)
            np.testing.assert_allclose(rescaled.per_query_weight, factor * original.per_query_weight, rtol=1e-9)
            total = len(original.per_query_weight)
            np.testing.assert_array_equal(selected_rows(rescaled, total), selected_rows(original, total))

    def test_k_larger_than_support_raises(self, rng):
        params, base, support = random_setup(rng, hw=(2, 2))
        with pytest.raises(ValidationError):
            compatibility(base, support, params, k=5)

    def test_no_base_queries_raises(self, rng):
        params, _, support = random_setup(rng)
        with pytest.raises(ValidationError):
            compatibility([], support, params)

    def test_merge_sums_weights(self, rng):
        params, base, _ = random_setup(rng)
        shots = [FeatureMap(as_f64(rng.normal(size=(3, 3, 4)))) for _ in range(2)]
        reports = [compatibility(base, shot, params, 2) for shot in shots]
        merged = merge_reports(reports)
        np.testing.assert_array_equal(merged.per_query_weight,
                                      reports[0].per_query_weight + reports[1].per_query_weight)
        assert merge_reports(reports[:1]) is reports[0]


class TestSelection:
    """Selección y duplicado de las queries más compatibles"""

    @staticmethod
    def _report(weights) -> CompatibilityReport:
        weights = np.asarray(weights, dtype=np.float64)
        return CompatibilityReport(
            per_query_weight=weights,
            topk_values=weights[:, None],
            source_class_of_query=tuple(range(len(weights))),
            scores=weights[:, None],
        )

    def test_random_instances_match_brute_force(self, rng):
        for _ in range(1000):
            total = int(rng.integers(1, 12))
            # enteros pequeños para forzar empates
            weights = rng.integers(-3, 4, size=total).astype(np.float64)
            n = int(rng.integers(1, total + 1))
            assert selected_rows(self._report(weights), n).tolist() == brute_select_rows(weights, n)

    def test_ties_prefer_lower_index(self):
        assert selected_rows(self._report([1.0, 2.0, 2.0, 1.0]), 3).tolist() == [1, 2, 0]

    def test_n_larger_than_stack_raises(self):
        with pytest.raises(ValidationError):
            selected_rows(self._report([1.0, 2.0]), 3)

    def test_duplicates_selected_rows(self, rng):
        params, base, support = random_setup(rng)
        report = compatibility(base, support, params, 3)
        novel = select_and_duplicate(report, base, 3, novel_class_id=7)
        rows = selected_rows(report, 3)
        stacked = np.concatenate([qs.queries.numpy() for qs in base], axis=0)
        assert novel.class_id == 7
        np.testing.assert_array_equal(novel.queries.numpy(), stacked[rows])

    def test_selection_independent_of_base_stacking_order(self, rng):
        """Permutar el orden de las clases base no cambia las queries duplicadas"""
        for _ in range(10):
            params, base, support = random_setup(rng, classes=(0, 1, 2, 3))
            reference = select_and_duplicate(compatibility(base, support, params, 3), base, 4, novel_class_id=9)
            order = rng.permutation(len(base)).tolist()
            permuted = [base[i] for i in order]
            novel = select_and_duplicate(compatibility(permuted, support, params, 3), permuted, 4, novel_class_id=9)
            np.testing.assert_array_equal(novel.queries.numpy(), reference.queries.numpy())

    def test_copies_are_independent(self, rng):
        params, base, support = random_setup(rng)
        before = [qs.queries.numpy().copy() for qs in base]
        novel = select_and_duplicate(compatibility(base, support, params, 3), base, 3, novel_class_id=7)
        copied = novel.queries.numpy().copy()

        novel.queries.assign_add(tf.ones_like(novel.queries))
        for qs, original in zip(base, before):
            np.testing.assert_array_equal(qs.queries.numpy(), original)

        base[0].queries.assign(tf.zeros_like(base[0].queries))
        np.testing.assert_array_equal(novel.queries.numpy(), copied + 1.0)

    def test_report_from_other_queries_raises(self, rng):
        params, base, support = random_setup(rng, classes=(0, 1))
        report = compatibility(base[:1], support, params, 2)
        with pytest.raises(ValidationError):
            select_and_duplicate(report, base, 2, novel_class_id=9)


class TestShotIntegration:
    """Integración de prototipos de K shots"""

    @staticmethod
    def _shots(rng, k, n=3, d=4, class_id=0):
        return [PrototypeSet(class_id, as_f64(rng.normal(size=(n, d)))) for _ in range(k)]

    def test_single_shot_is_identity(self, rng):
        shots = self._shots(rng, 1)
        integrated = integrate_shots(shots, as_f64(rng.normal(size=(3, 1))))
        np.testing.assert_allclose(integrated.prototypes.numpy(), shots[0].prototypes.numpy(), atol=1e-12)

    def test_uniform_weights_give_mean(self, rng):
        shots = self._shots(rng, 4)
        integrated = integrate_shots(shots, as_f64(np.full((3, 4), 0.7)))
        expected = np.mean([s.prototypes.numpy() for s in shots], axis=0)
        np.testing.assert_allclose(integrated.prototypes.numpy(), expected, atol=1e-12)

    @pytest.mark.parametrize('mode', ['per_query', 'per_shot_scalar', 'mean'])
    def test_matches_naive_oracle(self, rng, mode):
        for _ in range(10):
            k = int(rng.integers(1, 6))
            shots = self._shots(rng, k)
            weights = rng.normal(scale=3.0, size=(3, k))
            integrated = integrate_shots(shots, as_f64(weights), mode)
            expected = naive_integrate(np.stack([s.prototypes.numpy() for s in shots]), weights, mode)
            np.testing.assert_allclose(integrated.prototypes.numpy(), expected, atol=1e-10)

    def test_per_shot_scalar_shares_weights_across_queries(self, rng):
        shots = [PrototypeSet(0, as_f64(np.ones((2, 1)) * v)) for v in (0.0, 1.0)]
        weights = np.array([[0.0, 2.0], [2.0, 0.0]])
        integrated = integrate_shots(shots, as_f64(weights), 'per_shot_scalar').prototypes.numpy()
        np.testing.assert_allclose(integrated, 0.5, atol=1e-12)
        per_query = integrate_shots(shots, as_f64(weights), 'per_query').prototypes.numpy()
        assert per_query[0, 0] > 0.5 > per_query[1, 0]

    def test_raising_shot_weight_moves_toward_that_shot(self, rng):
        """Subir el peso de un shot acerca el prototipo integrado a ese shot"""
        shots = self._shots(rng, 3)
        base_weights = rng.normal(size=(3, 3))
        target = shots[1].prototypes.numpy()
        distances, untouched = [], []
        for delta in (0.0, 0.5, 1.0, 2.0, 4.0):
            weights = base_weights.copy()
            weights[0, 1] += delta
            integrated = integrate_shots(shots, as_f64(weights)).prototypes.numpy()
            distances.append(np.linalg.norm(integrated[0] - target[0]))
            untouched.append(integrated[1:])
        assert all(a > b for a, b in zip(distances, distances[1:]))
        for rows in untouched[1:]:
            np.testing.assert_allclose(rows, untouched[0], atol=1e-12)

    def test_raising_shot_column_moves_all_queries_in_scalar_mode(self, rng):
        shots = self._shots(rng, 3)
        base_weights = rng.normal(size=(3, 3))
        target = shots[2].prototypes.numpy()
        previous = None
        for delta in (0.0, 1.0, 3.0):
            weights = base_weights.copy()
            weights[:, 2] += delta
            integrated = integrate_shots(shots, as_f64(weights), 'per_shot_scalar').prototypes.numpy()
            distances = np.linalg.norm(integrated - target, axis=1)
            if previous is not None:
                assert np.all(distances < previous)
            previous = distances

    def test_mean_mode_ignores_weights(self, rng):
        shots = self._shots(rng, 4)
        integrated = integrate_shots(shots, as_f64(rng.normal(scale=5.0, size=(3, 4))), 'mean')
        expected = np.mean([s.prototypes.numpy() for s in shots], axis=0)
        np.testing.assert_allclose(integrated.prototypes.numpy(), expected, atol=1e-12)

    def test_mixed_classes_raise(self, rng):
        shots = self._shots(rng, 1, class_id=0) + self._shots(rng, 1, class_id=1)
        with pytest.raises(ValidationError):
            integrate_shots(shots, as_f64(np.zeros((3, 2))))

    def test_unknown_mode_raises(self, rng):
        with pytest.raises(ValidationError):
            integrate_shots(self._shots(rng, 2), as_f64(np.zeros((3, 2))), 'max')

    def test_weight_shape_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            integrate_shots(self._shots(rng, 2), as_f64(np.zeros((3, 3))))

    def test_no_shots_raises(self):
        with pytest.raises(ValidationError):
            integrate_shots([], as_f64(np.zeros((3, 0))))

    def test_shot_weights_shape(self, rng):
        params, base, _ = random_setup(rng)
        shots = [FeatureMap(as_f64(rng.normal(size=(3, 3, 4)))) for _ in range(5)]
        weights = shot_weights(base[0], shots, params, k=2)
        assert weights.shape == (3, 5)
        expected = compatibility([base[0]], shots[4], params, 2).per_query_weight
        np.testing.assert_array_equal(weights.numpy()[:, 4], expected)
