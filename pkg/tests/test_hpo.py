import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeguard.hpo import (
    FAILED,
    Evaluation,
    SearchSpace,
    dominates,
    optimize,
    pareto_front,
    scalarize,
    write_trace,
)
from treeguard.train import TrainConfig, fit_model
from treeguard.verify import adversarial_accuracy


def toy(seed=0, n=90):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    y = (X[:, 0] > 0.5).astype(int)
    return X[:60], y[:60], X[60:], y[60:]


SMALL = SearchSpace(n_trees=(2, 6), max_depth=(1, 3))


class TestScalarize:
    def test_example(self):
        assert scalarize((0.9, 0.8), (0.5, 0.5), 0.05) == pytest.approx(0.1075)

    def test_ideal(self):
        assert scalarize((1.0, 1.0)) == 0.0

    def test_accuracy_only(self):
        assert scalarize((0.8, 0.1), (1.0, 0.0), 0.05) == pytest.approx(0.2 * 1.05)
        assert scalarize((0.8, float("nan")), (1.0, 0.0)) == pytest.approx(0.21)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            scalarize((0.5, 0.5), (0.7, 0.7))


class TestPareto:
    def test_incomparable(self):
        assert pareto_front([(0.9, 0.7), (0.8, 0.8)]) == [(0.9, 0.7), (0.8, 0.8)]

    def test_dominated(self):
        assert pareto_front([(0.9, 0.8), (0.8, 0.7)]) == [(0.9, 0.8)]

    def test_duplicates_keep_first(self):
        a = Evaluation(0, TrainConfig(), (0.5, 0.5), (0.9, 0.8))
        b = Evaluation(1, TrainConfig(), (0.5, 0.5), (0.9, 0.8))
        assert pareto_front([a, b]) == [a]

    def test_failed_skipped(self):
        f = Evaluation(0, TrainConfig(), (0.5, 0.5), None, status=FAILED)
        ok = Evaluation(1, TrainConfig(), (0.5, 0.5), (0.5, 0.5))
        assert pareto_front([f, ok]) == [ok]

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=25))
    def test_front_properties(self, pts):
        pts = [(a / 10, b / 10) for a, b in pts]
        front = pareto_front(pts)
        assert front
        for p in front:
            assert not any(dominates(q, p) for q in pts)
        for q in pts:
            assert q in front or any(dominates(p, q) for p in front)
        assert len(set(front)) == len(front)


class TestSpace:
    def test_bad_range(self):
        with pytest.raises(ValueError):
            SearchSpace(max_depth=(5, 3))

    @settings(max_examples=50)
    @given(st.integers(0, 10**6), st.sampled_from(["RF", "GrootRF", "NoisyRF", "GBT", "RobustTrees"]))
    def test_samples_valid(self, seed, method):
        sp = SearchSpace()
        cfg = sp.sample(np.random.default_rng(seed), method, 0.05)
        assert 5 <= cfg.n_trees <= 125 and 3 <= cfg.max_depth <= 9
        assert 0.3 <= cfg.feature_subsample <= 1.0
        assert cfg.noise_copies in (1, 2, 3, 5)
        if method in ("RF", "GBT"):
            assert cfg.epsilon == 0
        else:
            assert cfg.epsilon == 0 or 0.005 <= cfg.epsilon <= 0.1 + 1e-12
        if method in ("GBT", "RobustTrees"):
            assert 0.05 <= cfg.learning_rate <= 0.5

    def test_round_trip(self):
        assert SearchSpace.from_dict(SMALL.to_dict()) == SMALL


class TestOptimize:
    def test_budget_one(self):
        Xtr, ytr, Xva, yva = toy()
        best, trace = optimize("RF", SMALL, 1, (Xtr, ytr), (Xva, yva), 2, 0.05, seed=1)
        assert len(trace) == 1 and best is trace[0]

    def test_singleton_space(self):
        Xtr, ytr, Xva, yva = toy()
        cfg = TrainConfig("GrootRF", n_trees=3, max_depth=2, epsilon=0.04, feature_subsample=0.5)
        best, _ = optimize("GrootRF", SearchSpace.single(cfg, eps_hat=0.04), 3, (Xtr, ytr), (Xva, yva), 2, 0.04)
        direct = fit_model(Xtr, ytr, 2, TrainConfig(**{**cfg.to_dict(), "seed": best.config.seed}))
        assert best.config.n_trees == 3 and best.config.epsilon == pytest.approx(0.04)
        assert best.model.dumps(include_times=False) == direct.dumps(include_times=False)
        acc = float(np.mean(direct.predict(Xva) == yva))
        assert best.objectives == (acc, adversarial_accuracy(direct, Xva, yva, 0.04))

    def test_winner_weakly_dominates_worst(self):
        Xtr, ytr, Xva, yva = toy(3)
        best, trace = optimize("RobustRF", SMALL, 6, (Xtr, ytr), (Xva, yva), 2, 0.05, seed=4)
        worst = max(trace, key=lambda e: scalarize(e.objectives))
        assert best.objectives[0] >= worst.objectives[0] or best.objectives[1] >= worst.objectives[1]
        # no completed evaluation strictly dominates the winner in both objectives
        assert not any(e.objectives[0] > best.objectives[0] and e.objectives[1] > best.objectives[1] for e in trace)
        for e in trace:
            assert 0 <= e.objectives[1] <= e.objectives[0] <= 1
            assert abs(sum(e.weights) - 1) < 1e-12

    def test_deterministic(self, tmp_path):
        Xtr, ytr, Xva, yva = toy(2)
        runs = []
        for k in range(2):
            best, trace = optimize("GBT", SMALL, 4, (Xtr, ytr), (Xva, yva), 2, 0.05, seed=9)
            p = tmp_path / f"t{k}.jsonl"
            write_trace(trace, str(p), include_times=False)
            runs.append((best.index, p.read_text()))
        assert runs[0] == runs[1]

    def test_failure_recorded(self, monkeypatch):
        import treeguard.hpo as hpo_mod

        calls = []

        def flaky(X, y, n, cfg):
            calls.append(cfg)
            if len(calls) == 1:
                raise RuntimeError("boom")
            return fit_model(X, y, n, cfg)

        monkeypatch.setattr(hpo_mod, "fit_model", flaky)
        Xtr, ytr, Xva, yva = toy()
        best, trace = optimize("RF", SMALL, 3, (Xtr, ytr), (Xva, yva), 2, 0.05)
        assert trace[0].status == FAILED and "boom" in trace[0].error
        assert len(trace) == 3 and best.index != 0

    def test_never_sees_test_split(self):
        # only the arrays handed in are touched: a NaN-free validation set is enough
        Xtr, ytr, Xva, yva = toy()
        best, _ = optimize("RF", SMALL, 2, (Xtr, ytr), (Xva, yva), 2, 0.05)
        assert best.completed

    def test_accuracy_only_skips_verification(self):
        Xtr, ytr, Xva, yva = toy()
        best, trace = optimize("RF", SMALL, 3, (Xtr, ytr), (Xva, yva), 2, 0.0, final_weights=(1.0, 0.0))
        assert all(e.verify_seconds == 0 and np.isnan(e.objectives[1]) for e in trace)
        assert best.objectives[0] == max(e.objectives[0] for e in trace)

    def test_bad_budget(self):
        Xtr, ytr, Xva, yva = toy()
        with pytest.raises(ValueError):
            optimize("RF", SMALL, 0, (Xtr, ytr), (Xva, yva), 2, 0.05)
