"""
Tests for the from-scratch random forest and permutation importance.

Run with: pytest tests/test_importance.py -v
"""

import numpy as np
import pytest

from engine.importance import (
    FeatureMatrix,
    Forest,
    SchemaMismatchError,
    build_feature_matrix,
    fit_forest,
    grow_tree,
    permutation_importance,
)
from engine.tiers import HouseholdProfile
from tests.conftest import make_record


def linear_matrix(seed: int = 0, n: int = 300) -> FeatureMatrix:
    """y depends strongly on x0, weakly on x1, not at all on x2."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, 3))
    y = 10 * X[:, 0] + 1 * X[:, 1] + rng.normal(0, 0.1, n)
    return FeatureMatrix(X, y, ["x0", "x1", "x2"])


def tiered_profile(ip: str, tier: float | None) -> HouseholdProfile:
    return HouseholdProfile(
        client_ip=ip, isp="ISP-A", country="US", year=2016, annual_test_count=2,
        off_peak_test_count=2, max_speed_mbps=tier or 0.0, rho=-1.0, single_household=True,
        eligible=tier is not None, tier_mbps=tier,
    )


class TestFeatureMatrix:

    def test_rejects_missing_values(self):
        with pytest.raises(ValueError, match="missing"):
            FeatureMatrix(np.array([[1.0], [np.nan]]), np.array([1.0, 2.0]), ["a"])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((3, 2)), np.zeros(2), ["a", "b"])
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((3, 2)), np.zeros(3), ["a"])

    def test_build_drops_untiered_tests(self):
        records = [
            make_record("10.0.0.1", speed=40.0),
            make_record("10.0.0.2", speed=10.0, isp="ISP-B"),
            make_record("10.0.0.3", speed=20.0),
        ]
        profiles = [tiered_profile("10.0.0.1", 50.0), tiered_profile("10.0.0.2", 12.0), tiered_profile("10.0.0.3", None)]
        matrix = build_feature_matrix(records, profiles)
        assert matrix.n_rows == 2
        assert matrix.dropped_rows == 1
        assert matrix.codebook["isp"] == {"ISP-A": 0, "ISP-B": 1}
        assert matrix.X[:, matrix.feature_names.index("tier_mbps")].tolist() == [50.0, 12.0]
        assert matrix.y.tolist() == [40.0, 10.0]

    def test_country_filter(self):
        records = [make_record("10.0.0.1"), make_record("10.0.0.2", country="AU")]
        profiles = [tiered_profile("10.0.0.1", 50.0), tiered_profile("10.0.0.2", 50.0)]
        assert build_feature_matrix(records, profiles, country="AU").n_rows == 1


class TestTrees:

    def test_step_function_fits_exactly(self):
        X = np.arange(20, dtype=float).reshape(-1, 1)
        y = np.where(X[:, 0] < 10, 0.0, 10.0)
        tree = grow_tree(X, y, np.random.default_rng(0), max_depth=1, min_leaf=1)
        assert tree.n_nodes == 3
        assert np.array_equal(tree.predict(X), y)
        assert 9.0 <= tree.threshold[0] < 10.0

    def test_min_leaf_respected(self):
        X = np.arange(10, dtype=float).reshape(-1, 1)
        y = np.array([0.0] * 9 + [100.0])
        tree = grow_tree(X, y, np.random.default_rng(0), max_depth=5, min_leaf=3)
        leaves = tree.predict(X)
        for value in np.unique(leaves):
            assert np.sum(leaves == value) >= 3

    def test_constant_target_is_single_leaf(self):
        tree = grow_tree(np.random.default_rng(1).normal(size=(30, 2)), np.full(30, 4.0), np.random.default_rng(0))
        assert tree.n_nodes == 1


class TestForest:

    def test_deterministic(self):
        m = linear_matrix()
        a = fit_forest(m, trees=10, seed=3)
        b = fit_forest(m, trees=10, seed=3)
        assert np.array_equal(a.predict(m.X), b.predict(m.X))

    def test_learns_signal(self):
        m = linear_matrix()
        forest = fit_forest(m, trees=20, seed=0)
        assert forest.oob_r2(m) > 0.8

    def test_json_round_trip_predictions(self):
        m = linear_matrix()
        forest = fit_forest(m, trees=5, seed=0)
        loaded = Forest.from_json(forest.to_json())
        assert np.array_equal(loaded.predict(m.X), forest.predict(m.X))
        assert loaded.feature_names == ["x0", "x1", "x2"]

    def test_unknown_dump_format(self):
        with pytest.raises(ValueError):
            Forest.from_json('{"format": "other", "version": 1}')

    def test_prediction_is_mean_of_trees(self):
        m = linear_matrix(n=120)
        forest = fit_forest(m, trees=7, seed=4)
        X = np.random.default_rng(1).uniform(0, 1, size=(25, 3))
        expected = sum(tree.predict(X) for tree in forest.trees) / len(forest.trees)
        assert forest.predict(X) == pytest.approx(expected, rel=1e-12)

    def test_loaded_forest_keeps_bag_record(self):
        m = linear_matrix(n=150)
        forest = fit_forest(m, trees=6, seed=2)
        loaded = Forest.from_json(forest.to_json())
        assert np.array_equal(loaded.in_bag, forest.in_bag)
        assert loaded.oob_r2(m) == forest.oob_r2(m)
        before = permutation_importance(forest, m, repeats=1, seed=5)
        after = permutation_importance(loaded, m, repeats=1, seed=5)
        assert [(e.feature, e.score) for e in after.ranked()] == [(e.feature, e.score) for e in before.ranked()]

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            fit_forest(FeatureMatrix(np.zeros((1, 2)), np.zeros(1), ["a", "b"]))

    def test_default_features_per_split(self):
        forest = fit_forest(linear_matrix(n=50), trees=2, seed=0)
        assert forest.params["features_per_split"] == 2


class TestPermutationImportance:

    @pytest.fixture(scope="class")
    def report(self):
        m = linear_matrix()
        forest = fit_forest(m, trees=20, seed=0, features_per_split=3)
        return permutation_importance(forest, m, repeats=2, seed=0)

    def test_ranking(self, report):
        assert [e.feature for e in report.ranked()] == ["x0", "x1", "x2"]
        assert report.rank_of("x0") == 1

    def test_scores_non_negative_and_shares_sum_to_one(self, report):
        assert all(e.score >= 0 for e in report.entries)
        assert sum(e.share for e in report.entries) == pytest.approx(1.0)

    def test_metadata(self, report):
        assert report.metadata["trees"] == 20
        assert report.metadata["repeats"] == 2
        assert report.metadata["rows"] == 300

    def test_schema_mismatch(self):
        m = linear_matrix()
        forest = fit_forest(m, trees=2, seed=0)
        renamed = FeatureMatrix(m.X, m.y, ["a", "b", "c"])
        with pytest.raises(SchemaMismatchError):
            permutation_importance(forest, renamed)

    def test_without_bootstrap_uses_every_row(self):
        m = linear_matrix(n=100)
        forest = fit_forest(m, trees=3, seed=0, bootstrap=False)
        report = permutation_importance(forest, m, repeats=1, seed=0)
        assert report.rank_of("x0") == 1

    def test_null_feature_near_zero_across_seeds(self):
        null, signal = [], []
        for seed in range(20):
            m = linear_matrix(seed=seed, n=200)
            forest = fit_forest(m, trees=10, max_depth=8, seed=seed)
            report = permutation_importance(forest, m, repeats=1, seed=seed)
            null.append(report.score_of("x2"))
            signal.append(report.score_of("x0"))
        null = np.asarray(null)
        se = null.std(ddof=1) / np.sqrt(null.size)
        assert null.mean() <= 2 * se + 0.01 * np.mean(signal)

    def test_duplicated_column_shares_importance(self):
        # two copies of the driving column split its importance between them
        m = linear_matrix(n=200)
        copied = FeatureMatrix(np.column_stack([m.X, m.X[:, 0]]), m.y, ["x0", "x1", "x2", "x0_copy"])
        base = permutation_importance(fit_forest(m, trees=20, seed=1, features_per_split=2), m, repeats=1, seed=1)
        report = permutation_importance(fit_forest(copied, trees=20, seed=1, features_per_split=2), copied,
                                        repeats=1, seed=1)
        assert {e.feature for e in report.ranked()[:2]} == {"x0", "x0_copy"}
        assert report.score_of("x0") < base.score_of("x0")
        assert report.score_of("x0_copy") < base.score_of("x0")


# =============================================================================
# Run with: pytest tests/test_importance.py -v
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
