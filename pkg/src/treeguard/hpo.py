"""Two-objective hyperparameter search over (accuracy, adversarial accuracy).

Candidates are drawn at random; each one is trained on the training split and
scored on the validation split only. Candidates are compared through the
augmented Chebyshev scalarization of the losses ``1 - objective``.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .train import BOOSTED_METHODS, METHODS, TrainConfig, fit_model
from .verify import DEFAULT_MAX_NODES, Verifier

log = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"
TIMEOUT = "timeout"

_TRAIN_EPS_METHODS = ("GrootRF", "RobustRF", "RobustTrees", "NoisyRF")


@dataclass
class SearchSpace:
    """Sampling ranges; a range with equal ends always yields that value.

    Parameters
    ----------
    n_trees : (int, int)
        Log-uniform integer range.
    max_depth : (int, int)
        Uniform integer range.
    eps_scale : (float, float)
        Training radius range as multiples of the calibrated radius,
        log-uniform.
    eps_zero_prob : float
        Probability of a zero training radius.
    learning_rate : (float, float)
        Log-uniform; boosting only.
    feature_subsample : (float, float)
        Uniform.
    noise_copies : tuple of int
        Choices for NoisyRF.
    """

    n_trees: tuple = (5, 125)
    max_depth: tuple = (3, 9)
    eps_scale: tuple = (0.1, 2.0)
    eps_zero_prob: float = 0.1
    learning_rate: tuple = (0.05, 0.5)
    feature_subsample: tuple = (0.3, 1.0)
    noise_copies: tuple = (1, 2, 3, 5)

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "eps_scale", "learning_rate", "feature_subsample"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"empty or non-positive range for {name}: {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if not self.noise_copies:
            raise ValueError("noise_copies needs at least one choice")
        if not 0 <= self.eps_zero_prob <= 1:
            raise ValueError("eps_zero_prob must lie in [0, 1]")
        self.noise_copies = tuple(int(c) for c in self.noise_copies)

    @classmethod
    def single(cls, cfg, eps_hat=1.0):
        """Space containing only ``cfg`` (its radius read relative to ``eps_hat``)."""
        scale = cfg.epsilon / eps_hat if cfg.epsilon > 0 else 1.0
        return cls(
            n_trees=(cfg.n_trees, cfg.n_trees),
            max_depth=(cfg.max_depth, cfg.max_depth),
            eps_scale=(scale, scale),
            eps_zero_prob=0.0 if cfg.epsilon > 0 else 1.0,
            learning_rate=(cfg.learning_rate, cfg.learning_rate),
            feature_subsample=(cfg.feature_subsample, cfg.feature_subsample),
            noise_copies=(cfg.noise_copies,),
        )

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def sample(self, rng, method, eps_hat, base=None):
        """Draw one :class:`TrainConfig`; every field is drawn so the stream
        of random numbers does not depend on ``method``."""
        base = base or TrainConfig(method=method)
        n_trees = _log_int(rng, *self.n_trees)
        depth = int(rng.integers(self.max_depth[0], self.max_depth[1] + 1))
        zero = rng.random() < self.eps_zero_prob
        scale = _log_uniform(rng, *self.eps_scale)
        lr = _log_uniform(rng, *self.learning_rate)
        fs = float(rng.uniform(*self.feature_subsample))
        copies = int(self.noise_copies[int(rng.integers(len(self.noise_copies)))])
        seed = int(rng.integers(2**31 - 1))
        eps = 0.0 if zero or method not in _TRAIN_EPS_METHODS else float(scale * eps_hat)
        return replace(
            base,
            method=method,
            n_trees=n_trees,
            max_depth=depth,
            epsilon=eps,
            learning_rate=lr if method in BOOSTED_METHODS else base.learning_rate,
            feature_subsample=fs,
            noise_copies=copies,
            seed=seed,
        )


def _log_uniform(rng, lo, hi):
    if lo == hi:
        rng.random()
        return float(lo)
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _log_int(rng, lo, hi):
    # uniform in log space over [lo - 0.5, hi + 0.5) so the end points get fair mass
    v = _log_uniform(rng, max(lo - 0.5, 0.5), hi + 0.5)
    return int(min(max(round(v), lo), hi))


@dataclass
class Evaluation:
    index: int
    config: TrainConfig
    weights: tuple
    objectives: tuple = None  # (accuracy, adversarial accuracy) on validation
    train_seconds: float = 0.0
    verify_seconds: float = 0.0
    status: str = OK
    error: str = ""
    model: object = field(default=None, repr=False)

    @property
    def completed(self):
        return self.status == OK

    def to_dict(self, include_times=True):
        d = {
            "index": self.index,
            "config": self.config.to_dict(),
            "weights": list(self.weights),
            "objectives": None if self.objectives is None else list(self.objectives),
            "status": self.status,
            "error": self.error,
        }
        if include_times:
            d["train_seconds"] = self.train_seconds
            d["verify_seconds"] = self.verify_seconds
        return d


def scalarize(objectives, weights=(0.5, 0.5), rho=0.05):
    """Augmented Chebyshev loss of objectives in ``[0, 1]``; lower is better.

    Components with zero weight are ignored, so an unmeasured objective may be
    NaN when its weight is zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("weights must be non-negative and sum to 1")
    f = 1.0 - np.asarray(objectives, dtype=np.float64)
    terms = np.where(w > 0, w * f, 0.0)
    return float(terms.max() + rho * terms.sum())


def dominates(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(evals):
    """Non-dominated completed evaluations; duplicates keep the first seen.

    Accepts :class:`Evaluation` objects or plain objective tuples.
    """
    items = [e for e in evals if not isinstance(e, Evaluation) or e.completed]
    objs = [tuple(e.objectives) if isinstance(e, Evaluation) else tuple(e) for e in items]
    front = []
    seen = set()
    for i, (item, o) in enumerate(zip(items, objs)):
        if o in seen:
            continue
        if any(dominates(p, o) for p in objs):
            continue
        seen.add(o)
        front.append(item)
    return front


def _evaluate(index, cfg, weights, data, eps_hat, max_nodes, config_time_limit, verify):
    X_train, y_train, X_valid, y_valid, n_classes = data
    ev = Evaluation(index, cfg, tuple(weights))
    start = time.perf_counter()
    try:
        model = fit_model(X_train, y_train, n_classes, cfg)
    except Exception as exc:  # a bad config must not end the search
        ev.status, ev.error = FAILED, f"{type(exc).__name__}: {exc}"
        ev.train_seconds = time.perf_counter() - start
        log.warning("candidate %d failed to train: %s", index, ev.error)
        return ev
    ev.train_seconds = model.meta["train_seconds"]
    ev.model = model
    pred = model.predict(X_valid)
    good = pred == y_valid
    acc = float(good.mean())
    if not verify:
        ev.objectives = (acc, float("nan"))
        return ev
    v = Verifier(model, max_nodes=max_nodes, n_features=X_valid.shape[1])
    robust = 0
    for x, p in zip(X_valid[good], pred[good]):
        if config_time_limit is not None:
            left = config_time_limit - (time.perf_counter() - start)
            if left <= 0:
                ev.status, ev.error = TIMEOUT, "per-config time limit reached"
                ev.verify_seconds = v.seconds
                return ev
            v.time_limit = left
        res = v.check(x, eps_hat, int(p))
        if res.timeout:
            ev.status, ev.error = TIMEOUT, "verifier timeout"
            ev.verify_seconds = v.seconds
            return ev
        robust += res.robust
    ev.verify_seconds = v.seconds
    ev.objectives = (acc, robust / len(y_valid))
    return ev


def optimize(method, space, budget, train, valid, n_classes, eps_hat, seed=0,
             final_weights=(0.5, 0.5), rho=0.05, max_nodes=DEFAULT_MAX_NODES,
             config_time_limit=600.0, base=None):
    """Random search for ``method``; returns ``(winner, trace)``.

    Parameters
    ----------
    train, valid : (X, y)
        Encoded training and validation arrays. The test split is never seen.
    eps_hat : float
        Radius at which adversarial accuracy is measured.
    final_weights : (float, float)
        Weights of the scalarization picking the winner. With a zero weight
        on adversarial accuracy no verification is run.
    config_time_limit : float or None
        Wall-clock cap per candidate (training plus verification).

    The winner is None when no candidate completed.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    data = (
        np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.int64),
        np.asarray(valid[0], dtype=np.float64), np.asarray(valid[1], dtype=np.int64),
        n_classes,
    )
    verify = final_weights[1] > 0
    trace = []
    for k in range(budget):
        weights = tuple(float(w) for w in rng.dirichlet(np.ones(2)))
        cfg = space.sample(rng, method, eps_hat, base=base)
        trace.append(_evaluate(k, cfg, weights, data, eps_hat, max_nodes, config_time_limit, verify))
    done = [e for e in trace if e.completed]
    if not done:
        return None, trace
    winner = min(done, key=lambda e: (scalarize(e.objectives, final_weights, rho), e.index))
    return winner, trace


def write_trace(trace, path, include_times=True):
    with open(path, "w") as fh:
        for ev in trace:
            fh.write(json.dumps(ev.to_dict(include_times), sort_keys=True) + "\n")
