import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_ensemble, random_point
from treeguard.trees import BOOSTED, FOREST, Box, Ensemble, Tree, predict, reachable_leaves, score_bounds


def stump(threshold=0.5, left=(1.0, 0.0), right=(0.0, 1.0), feature=0):
    return Tree([feature, -1, -1], [threshold, 0, 0], [1, -1, -1], [2, -1, -1], np.array([[0.5, 0.5], left, right]))


def logit_stump(threshold, lv, rv, feature=0):
    return Tree([feature, -1, -1], [threshold, 0, 0], [1, -1, -1], [2, -1, -1], np.array([[0.0], [lv], [rv]]))


class TestPredict:
    def test_single_split(self):
        e = Ensemble(FOREST, [stump()], 2, n_features=1)
        assert predict(e, [0.3]) == 0
        assert predict(e, [0.5]) == 0  # closed-left
        assert predict(e, [0.51]) == 1

    def test_soft_vote(self):
        t1 = stump(0.5, (0.8, 0.2), (0.0, 1.0))
        t2 = stump(0.5, (0.4, 0.6), (0.0, 1.0))
        e = Ensemble(FOREST, [t1, t2], 2, n_features=1)
        np.testing.assert_allclose(e.decision_scores([[0.2]])[0], [0.6, 0.4])
        assert predict(e, [0.2]) == 0

    def test_boosted_zero_logit_is_class_zero(self):
        e = Ensemble(BOOSTED, [logit_stump(0.5, -0.25, 1.0)], 2, base_score=0.25, n_features=1)
        assert predict(e, [0.1]) == 0
        assert predict(e, [0.9]) == 1

    def test_forest_tie_lowest_class(self):
        e = Ensemble(FOREST, [stump(0.5, (0.5, 0.5), (0.5, 0.5))], 2, n_features=1)
        assert predict(e, [0.7]) == 0

    def test_multiclass_boosted(self):
        trees = []
        for c, v in enumerate([0.1, 0.7, 0.7]):
            t = logit_stump(0.5, v, -v)
            t.output_class = c
            trees.append(t)
        e = Ensemble(BOOSTED, trees, 3, base_score=[0.0, 0.0, 0.0], n_features=1)
        assert predict(e, [0.2]) == 1  # tie between 1 and 2 goes low
        assert predict(e, [0.8]) == 0

    def test_dimension_mismatch(self):
        e = Ensemble(FOREST, [stump(feature=2)], 2)
        with pytest.raises(ValueError):
            e.predict(np.zeros((1, 2)))


class TestReachable:
    def test_full_domain(self):
        t = stump()
        assert [i for i, _ in reachable_leaves(t, Box.unit(1))] == [1, 2]

    def test_right_only(self):
        assert [i for i, _ in reachable_leaves(stump(), Box(np.array([0.6]), np.array([0.7])))] == [2]

    def test_point_on_threshold(self):
        assert [i for i, _ in reachable_leaves(stump(), Box(np.array([0.5]), np.array([0.5])))] == [1]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_partition_of_domain(self, seed):
        rng = np.random.default_rng(seed)
        e = random_ensemble(rng)
        d = e.n_features
        for t in e.trees:
            leaves = reachable_leaves(t, Box.unit(d))
            # dead leaves (contradictory paths) are never reported
            assert set(i for i, _ in leaves) <= set(t.leaves.tolist())
            assert np.isclose(sum(np.prod(b.hi - b.lo) for _, b in leaves), 1.0)
            # every random point lies in exactly the leaf the tree routes it to
            pts = rng.uniform(0, 1, (200, d))
            routed = t.apply(pts)
            for p, r in zip(pts, routed):
                inside = [i for i, b in leaves if b.contains(p)]
                assert inside == [r]


class TestScoreBounds:
    def test_single_leaf_exact(self):
        e = Ensemble(FOREST, [stump(), stump(0.3, (0.2, 0.8), (0.9, 0.1))], 2, n_features=1)
        lo, hi = score_bounds(e, Box(np.array([0.6]), np.array([0.7])))
        np.testing.assert_allclose(lo, hi)
        np.testing.assert_allclose(lo, e.decision_scores([[0.65]])[0])

    def test_straddling_two_leaves(self):
        e = Ensemble(BOOSTED, [logit_stump(0.5, 0.2, 0.9)], 2, n_features=1)
        lo, hi = score_bounds(e, Box(np.array([0.4]), np.array([0.6])))
        assert (lo[1], hi[1]) == (0.2, 0.9)

    def test_empty_box(self):
        e = Ensemble(FOREST, [stump()], 2, n_features=1)
        with pytest.raises(ValueError):
            score_bounds(e, Box(np.array([0.6]), np.array([0.5])))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monte_carlo_containment(self, seed):
        rng = np.random.default_rng(seed)
        e = random_ensemble(rng, max_trees=3, n_classes=int(rng.integers(2, 4)))
        d = e.n_features
        a, b = rng.uniform(0, 1, (2, d))
        box = Box(np.minimum(a, b), np.maximum(a, b))
        lo, hi = score_bounds(e, box)
        pts = rng.uniform(box.lo, box.hi, (1000, d))
        s = e.decision_scores(pts)
        assert np.all(s >= lo - 1e-12) and np.all(s <= hi + 1e-12)


class TestSerialization:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        e = random_ensemble(rng, n_classes=int(rng.integers(2, 4)))
        e.meta = {"method": "x", "train_seconds": 1.5}
        back = Ensemble.from_dict(__import__("json").loads(e.dumps()))
        pts = np.vstack([rng.uniform(0, 1, (300, e.n_features)), [random_point(rng, e, e.n_features) for _ in range(50)]])
        np.testing.assert_array_equal(back.predict(pts), e.predict(pts))
        np.testing.assert_array_equal(back.decision_scores(pts), e.decision_scores(pts))
        for t0, t1 in zip(e.trees, back.trees):
            np.testing.assert_array_equal(t0.threshold, t1.threshold)  # bit exact

    def test_file_and_times(self, tmp_path):
        e = Ensemble(FOREST, [stump(0.1 + 0.2)], 2, meta={"train_seconds": 3.0, "method": "RF"}, n_features=1)
        p = tmp_path / "m.json"
        e.save(str(p))
        back = Ensemble.load(str(p))
        assert back.trees[0].threshold[0] == 0.1 + 0.2
        assert "train_seconds" not in e.to_dict(include_times=False)["meta"]


def test_piecewise_constant_on_cells():
    rng = np.random.default_rng(3)
    for _ in range(30):
        e = random_ensemble(rng)
        d = e.n_features
        for _ in range(20):
            x = rng.uniform(0, 1, d)
            # the cell of x: intersection of the leaf boxes x falls into
            cell = Box.unit(d)
            for t in e.trees:
                i = t.apply(x[None])[0]
                cell = cell.intersect(dict(reachable_leaves(t, Box.unit(d)))[i])
            assert cell.contains(x)
            pts = rng.uniform(cell.lo, cell.hi, (50, d))
            assert np.all(e.predict(pts) == e.predict_one(x))
