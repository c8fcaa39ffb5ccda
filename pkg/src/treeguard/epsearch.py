"""Iterative estimation of the perturbation size that hits a target success rate.

Per test sample the search keeps an upper bound ``u`` (the smallest known
misclassifying perturbation, with its witness) and a lower bound ``r`` (the
largest radius proven robust). Evaluating a new radius only calls the verifier
for samples with ``r < eps < u``; everything else is decided from the bounds.
New radii come from a rescaled first guess, then secant steps on
``eta(eps) - target``, then interpolation inside a bracketing pair.
"""
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .trees import as_ensemble
from .verify import DEFAULT_MAX_NODES, Verifier, encode_labels

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    eta_target: float = 0.1
    band: float = 0.02
    margin: float = 1e-6
    secant_budget: int = 10
    time_limit: float = None
    eps0: float = 0.05
    max_evals: int = 50
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        if not 0 < self.eta_target < 1:
            raise ValueError("eta_target must lie in (0, 1)")
        if self.band <= 0 or self.margin <= 0:
            raise ValueError("band and margin must be > 0")
        if not 0 < self.eps0 <= 1:
            raise ValueError("eps0 must lie in (0, 1]")


@dataclass
class SearchState:
    X: np.ndarray  # correctly classified test samples only
    y: np.ndarray  # their (clean) predictions
    upper: np.ndarray
    lower: np.ndarray
    witnesses: list
    n_test: int
    pairs: list = field(default_factory=list)  # (eps, eta) in evaluation order
    calls: int = 0
    verifier_seconds: float = 0.0
    secant_steps: int = 0
    sides: list = field(default_factory=list)  # "lo"/"hi" per bracketed evaluation
    trace: list = field(default_factory=list)
    excluded: int = 0  # misclassified test samples

    @classmethod
    def create(cls, model, X, y):
        ens = as_ensemble(model)
        X = np.asarray(X, dtype=np.float64)
        y = encode_labels(model, y)
        pred = ens.predict(X)
        good = pred == y
        n = int(good.sum())
        return cls(
            X=X[good],
            y=pred[good],
            upper=np.full(n, np.inf),
            lower=np.zeros(n),
            witnesses=[None] * n,
            n_test=len(X),
            excluded=int((~good).sum()),
        )

    @property
    def n_active(self):
        return len(self.y)

    def evaluated(self, eps):
        for e, eta in self.pairs:
            if e == eps:
                return eta
        return None

    def bracket(self, target):
        """Tightest ``((eps_lo, eta_lo), (eps_hi, eta_hi))`` around ``target`` or None."""
        below = [p for p in self.pairs if p[1] < target]
        above = [p for p in self.pairs if p[1] > target]
        if not below or not above:
            return None
        return max(below), min(above)

    def monotone(self):
        ordered = sorted(self.pairs)
        return all(a[1] <= b[1] for a, b in zip(ordered, ordered[1:]))


def evaluate_eta(state, eps, verifier):
    """Success rate at ``eps``; only undecided samples reach the verifier.

    A sample is vulnerable when a witness within ``eps`` is known and robust
    when a robustness proof at a radius ``>= eps`` exists. Verifier timeouts
    drop the sample from both counts.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    known = state.evaluated(eps)
    if known is not None:
        return known
    vulnerable = 0
    timeouts = 0
    calls = 0
    seconds = 0.0
    for i in range(state.n_active):
        if state.upper[i] <= eps:
            vulnerable += 1
            continue
        if state.lower[i] >= eps:
            continue
        res = verifier.check(state.X[i], eps, int(state.y[i]), warm_start=state.witnesses[i])
        calls += 1
        seconds += res.wall_seconds
        if res.vulnerable:
            dist = float(np.max(np.abs(res.witness - state.X[i])))
            if dist < state.upper[i]:
                state.upper[i] = dist
                state.witnesses[i] = res.witness
            vulnerable += 1
        elif res.robust:
            state.lower[i] = max(state.lower[i], eps)
        else:
            timeouts += 1
            log.warning("verifier timeout on sample %d at eps=%g", i, eps)
    denom = state.n_active - timeouts
    eta = vulnerable / denom if denom > 0 else 0.0
    state.calls += calls
    state.verifier_seconds += seconds
    state.pairs.append((float(eps), float(eta)))
    state.trace.append({
        "iteration": len(state.pairs),
        "eps": float(eps),
        "eta": float(eta),
        "verifier_calls": calls,
        "timeouts": timeouts,
        "verifier_seconds": state.verifier_seconds,
    })
    return eta


def _clamp(eps, state):
    if eps > 1.0:
        return 1.0
    if not eps > 0.0:
        smallest = min(e for e, _ in state.pairs)
        return smallest / 2.0
    return float(eps)


def next_epsilon(state, config):
    """Next radius to evaluate.

    Inside a bracket: linear interpolation, or bisection when the same end was
    replaced twice in a row. Otherwise a secant step on the two most recent
    distinct pairs while the secant budget lasts. A single pair is rescaled by
    ``target / max(eta, 1 / (2 n))``. Flat steps outside a bracket double or
    halve the radius.
    """
    if not state.pairs:
        raise ValueError("next_epsilon needs at least one evaluated pair")
    target = config.eta_target
    br = state.bracket(target)
    if br is not None:
        (e_lo, h_lo), (e_hi, h_hi) = br
        if len(state.sides) >= 2 and state.sides[-1] == state.sides[-2]:
            return 0.5 * (e_lo + e_hi)
        return e_lo + (target - h_lo) * (e_hi - e_lo) / (h_hi - h_lo)

    distinct = []
    for e, h in reversed(state.pairs):
        if all(e != d[0] for d in distinct):
            distinct.append((e, h))
        if len(distinct) == 2:
            break
    if len(distinct) == 1:
        e0, h0 = distinct[0]
        floor = 1.0 / (2 * max(state.n_active, 1))
        return _clamp(e0 * target / max(h0, floor), state)

    (e2, h2), (e1, h1) = distinct
    if state.secant_steps < config.secant_budget and h1 != h2:
        state.secant_steps += 1
        return _clamp(e2 - (h2 - target) * (e2 - e1) / (h2 - h1), state)
    evaluated = [e for e, _ in state.pairs]
    if all(h < target for _, h in state.pairs):
        return min(1.0, 2.0 * max(evaluated))
    return min(evaluated) / 2.0


@dataclass
class SearchResult:
    eps_hat: float
    eta: float
    state: SearchState
    reason: str
    unreachable: bool = False

    @property
    def n_evals(self):
        return len(self.state.pairs)


def _pick(state, target):
    pairs = state.pairs
    br = state.bracket(target)
    if br is not None:
        lo, hi = br[0][0], br[1][0]
        pairs = [p for p in pairs if lo <= p[0] <= hi]
    return min(pairs, key=lambda p: (abs(p[1] - target), p[0]))


def search_epsilon(model, X, y, config=None, verifier=None):
    """Estimate ``eps_hat`` with ``eta(eps_hat)`` close to ``config.eta_target``.

    Stops when ``eta`` is within ``band`` of the target, when the bracketing
    radii are within ``margin``, on the wall-clock limit, or when the target
    cannot be reached inside the unit box (``unreachable``; the largest
    evaluated radius is returned).
    """
    config = config or SearchConfig()
    verifier = verifier or Verifier(model, max_nodes=config.max_nodes, n_features=np.shape(X)[1])
    state = SearchState.create(model, X, y)
    if state.n_active == 0:
        raise ValueError("search needs at least one correctly classified test sample")
    target = config.eta_target
    start = time.perf_counter()
    eps = config.eps0
    reason = "max_evals"
    for _ in range(config.max_evals):
        before = state.bracket(target)
        eta = evaluate_eta(state, eps, verifier)
        after = state.bracket(target)
        if after is not None and before is not None:
            state.sides.append("lo" if after[0] != before[0] else "hi")
        if abs(eta - target) <= config.band:
            reason = "band"
            break
        if after is not None and after[1][0] - after[0][0] <= config.margin:
            reason = "margin"
            break
        if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
            reason = "time"
            break
        if after is None:
            evaluated = [e for e, _ in state.pairs]
            if max(evaluated) >= 1.0 and all(h < target for _, h in state.pairs):
                reason = "unreachable"
                break
            if min(evaluated) <= config.margin and all(h > target for _, h in state.pairs):
                reason = "unreachable"
                break
        nxt = next_epsilon(state, config)
        if state.evaluated(nxt) is not None:
            if after is None:
                reason = "stalled"
                break
            nxt = 0.5 * (after[0][0] + after[1][0])
            if state.evaluated(nxt) is not None:
                reason = "margin"
                break
        eps = nxt
    if reason == "unreachable":
        if all(h < target for _, h in state.pairs):
            eps_hat = max(e for e, _ in state.pairs)
        else:
            eps_hat = min(e for e, _ in state.pairs)
        return SearchResult(eps_hat, state.evaluated(eps_hat), state, reason, unreachable=True)
    eps_hat, eta = _pick(state, target)
    return SearchResult(eps_hat, eta, state, reason)


def write_trace(state, path):
    with open(path, "w") as fh:
        for row in state.trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
