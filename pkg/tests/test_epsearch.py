import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeguard.epsearch import SearchConfig, SearchState, evaluate_eta, next_epsilon, search_epsilon, write_trace
from treeguard.train import TrainConfig, fit_model
from treeguard.trees import FOREST, Ensemble, Tree
from treeguard.verify import Verifier


def stump():
    tree = Tree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], np.array([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]))
    return Ensemble(FOREST, [tree], 2, n_features=1)


def distance_dataset(distances):
    """Class-1 samples right of the stump threshold at the given distances."""
    X = (0.5 + np.asarray(distances, dtype=float))[:, None]
    return X, np.ones(len(X), dtype=int)


def state_with(pairs, n=100):
    st_ = SearchState.create(stump(), *distance_dataset(np.arange(1, n + 1) / 1000))
    st_.pairs = list(pairs)
    return st_


class TestNextEpsilon:
    def test_secant_example(self):
        assert next_epsilon(state_with([(0.1, 0.04), (0.2, 0.16)]), SearchConfig()) == pytest.approx(0.15)

    def test_interpolation_example(self):
        assert next_epsilon(state_with([(0.1, 0.08), (0.2, 0.16)]), SearchConfig()) == pytest.approx(0.125)

    def test_secant_outside_bracket(self):
        # both below target: extrapolate along the secant
        assert next_epsilon(state_with([(0.1, 0.02), (0.2, 0.06)]), SearchConfig()) == pytest.approx(0.3)

    def test_secant_clamped_to_unit(self):
        assert next_epsilon(state_with([(0.1, 0.0), (0.2, 0.001)]), SearchConfig()) == 1.0

    def test_flat_pair_expands(self):
        assert next_epsilon(state_with([(0.1, 0.02), (0.2, 0.02)]), SearchConfig()) == pytest.approx(0.4)
        assert next_epsilon(state_with([(0.1, 0.5), (0.2, 0.5)]), SearchConfig()) == pytest.approx(0.05)

    def test_stalled_bracket_bisects(self):
        s = state_with([(0.1, 0.08), (0.2, 0.16)])
        s.sides = ["lo", "lo"]
        assert next_epsilon(s, SearchConfig()) == pytest.approx(0.15)

    def test_single_pair_rescale(self):
        assert next_epsilon(state_with([(0.05, 0.5)]), SearchConfig()) == pytest.approx(0.01)
        # eta floor 1 / (2 n) with n = 100 correct samples
        assert next_epsilon(state_with([(0.001, 0.0)]), SearchConfig()) == pytest.approx(0.001 * 0.1 / 0.005)

    def test_secant_budget(self):
        s = state_with([(0.1, 0.02), (0.2, 0.06)])
        s.secant_steps = 10
        assert next_epsilon(s, SearchConfig(secant_budget=10)) == pytest.approx(0.4)

    def test_needs_a_pair(self):
        with pytest.raises(ValueError):
            next_epsilon(state_with([]), SearchConfig())


class TestEvaluateEta:
    def test_stump_step_function(self):
        d = np.arange(1, 101) / 1000
        X, y = distance_dataset(d)
        s = SearchState.create(stump(), X, y)
        v = Verifier(stump())
        for eps in (0.0005, 0.0105, 0.0505, 0.0995):
            assert evaluate_eta(s, eps, v) == pytest.approx(np.mean(d <= eps))

    def test_repeat_costs_nothing(self):
        X, y = distance_dataset(np.arange(1, 21) / 100)
        s = SearchState.create(stump(), X, y)
        v = Verifier(stump())
        a = evaluate_eta(s, 0.095, v)
        calls = v.calls
        assert evaluate_eta(s, 0.095, v) == a
        assert v.calls == calls

    def test_fully_cached(self):
        X, y = distance_dataset(np.arange(1, 21) / 100)
        s = SearchState.create(stump(), X, y)
        v = Verifier(stump())
        evaluate_eta(s, 0.5, v)  # everyone vulnerable; witnesses cached
        calls = v.calls
        assert evaluate_eta(s, 0.45, v) == 1.0
        assert v.calls == calls

    def test_misclassified_excluded(self):
        X, y = distance_dataset(np.arange(1, 11) / 100)
        y[:5] = 0
        s = SearchState.create(stump(), X, y)
        assert s.n_active == 5 and s.excluded == 5
        assert evaluate_eta(s, 0.075, Verifier(stump())) == pytest.approx(0.4)

    def test_negative_eps(self):
        s = SearchState.create(stump(), *distance_dataset([0.1]))
        with pytest.raises(ValueError):
            evaluate_eta(s, -0.1, Verifier(stump()))


class TestSearch:
    def test_quantile_oracle(self):
        d = np.arange(1, 101) / 1000
        res = search_epsilon(stump(), *distance_dataset(d), SearchConfig(eta_target=0.1, band=0.02))
        # the 10th and 11th smallest distances bracket the 10% quantile
        assert np.sort(d)[9] <= res.eps_hat <= np.sort(d)[10]
        assert res.n_evals <= 15

    def test_immediate_convergence(self):
        d = np.arange(1, 101) / 1000
        res = search_epsilon(stump(), *distance_dataset(d), SearchConfig(eps0=0.0105))
        assert res.n_evals == 1 and res.reason == "band"

    def test_constant_predictor_unreachable(self):
        const = Ensemble(FOREST, [Tree.leaf([0.2, 0.8])], 2, n_features=1)
        X = np.linspace(0, 1, 10)[:, None]
        res = search_epsilon(const, X, np.ones(10, dtype=int))
        assert res.unreachable and res.eta == 0.0
        assert res.eps_hat == max(e for e, _ in res.state.pairs) == 1.0

    def test_no_correct_samples(self):
        with pytest.raises(ValueError):
            search_epsilon(stump(), *[np.array([[0.9]]), np.array([0])])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SearchConfig(eta_target=1.5)
        with pytest.raises(ValueError):
            SearchConfig(band=0)

    def test_trace_file(self, tmp_path):
        res = search_epsilon(stump(), *distance_dataset(np.arange(1, 101) / 1000))
        p = tmp_path / "trace.jsonl"
        write_trace(res.state, str(p))
        rows = [json.loads(line) for line in p.read_text().splitlines()]
        assert len(rows) == res.n_evals
        assert set(rows[0]) == {"iteration", "eps", "eta", "verifier_calls", "timeouts", "verifier_seconds"}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.05, 0.3))
    def test_invariants_on_trained_models(self, seed, target):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(120, 3))
        y = (X[:, 0] + X[:, 1] + 0.2 * rng.normal(size=120) > 1).astype(int)
        model = fit_model(X[:80], y[:80], 2, TrainConfig(n_trees=4, max_depth=3, seed=seed))
        Xt, yt = X[80:], y[80:]
        if not np.any(model.predict(Xt) == yt):
            return
        v = Verifier(model)
        cfg = SearchConfig(eta_target=target, band=0.02)
        res = search_epsilon(model, Xt, yt, cfg, verifier=v)
        s = res.state
        assert np.all(s.lower < s.upper)
        assert s.monotone()
        distinct = len(set(e for e, _ in s.pairs))
        assert v.calls <= s.n_active * distinct
        br = s.bracket(target)
        if br is not None and not res.unreachable:
            assert br[0][0] <= res.eps_hat <= br[1][0]
        # independent check against exact per-sample distance brackets
        brackets = [v.minimal_distance(x, tol=1e-7, y_pred=int(p)) for x, p in zip(s.X, s.y)]
        surely = sum(b.hi <= res.eps_hat for b in brackets if not b.robust_everywhere)
        maybe = sum(b.lo < res.eps_hat for b in brackets if not b.robust_everywhere)
        assert surely <= round(res.eta * s.n_active) <= maybe
        if res.reason == "band":
            assert abs(res.eta - target) <= 0.02
