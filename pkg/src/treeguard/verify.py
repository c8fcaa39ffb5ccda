"""Exact l-infinity robustness verification of tree ensembles.

The feasibility question "is there a ``z`` with ``|z - x|_inf <= eps`` inside
the unit box whose prediction differs from ``y``?" is answered by
branch-and-bound over axis-aligned boxes. A box is pruned when an upper bound
on every rival class's score margin is negative; it is a *cell* when every
tree reaches exactly one leaf, in which case the prediction is constant on it
and a single evaluation decides it. Otherwise the box is split at a tree
threshold it straddles. Leaf decisions always go through
:meth:`Ensemble.predict`, so a reported witness is checked by the same code
that defines the model.
"""
import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .trees import Box, as_ensemble

ROBUST = "robust"
VULNERABLE = "vulnerable"
TIMEOUT = "timeout"

DEFAULT_MAX_NODES = 10**7
# bounds closer to zero than this are settled by exact prediction, not pruned
_SLACK = 1e-9


@dataclass
class Query:
    ensemble: object
    x: np.ndarray
    eps: float
    y_pred: int = None
    warm_start: np.ndarray = None
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        self.x = np.asarray(self.x, dtype=np.float64)
        lo, hi = self.domain
        if np.any(self.x < lo) or np.any(self.x > hi):
            raise ValueError("x lies outside the domain box")


@dataclass
class RobustnessResult:
    verdict: str
    witness: np.ndarray = None
    prediction: int = None
    nodes_explored: int = 0
    wall_seconds: float = 0.0

    @property
    def robust(self):
        return self.verdict == ROBUST

    @property
    def vulnerable(self):
        return self.verdict == VULNERABLE

    @property
    def timeout(self):
        return self.verdict == TIMEOUT


@dataclass
class DistanceBracket:
    lo: float
    hi: float
    witness: np.ndarray = None
    complete: bool = True
    checks: int = 0
    wall_seconds: float = 0.0

    @property
    def robust_everywhere(self):
        return self.witness is None and self.complete


class Verifier:
    """Reusable exact verifier bound to one ensemble.

    Parameters
    ----------
    model : Ensemble or fitted estimator
    max_nodes : int
        Boxes explored per query before giving up with ``TIMEOUT``.
    time_limit : float, optional
        Wall-clock seconds per query before giving up with ``TIMEOUT``.
    """

    def __init__(self, model, max_nodes=DEFAULT_MAX_NODES, time_limit=None, n_features=None):
        self.ensemble = as_ensemble(model)
        self.max_nodes = int(max_nodes)
        self.time_limit = time_limit
        self.n_features = self.ensemble.n_features if n_features is None else n_features
        self.table = self.ensemble.leaf_table(self.n_features)
        self.calls = 0
        self.seconds = 0.0

    def predict(self, z):
        return self.ensemble.predict_one(z)

    def check(self, x, eps, y_pred=None, warm_start=None, domain=(0.0, 1.0)):
        start = time.perf_counter()
        x = np.asarray(x, dtype=np.float64)
        if eps < 0:
            raise ValueError("eps must be >= 0")
        if x.shape[0] < self.ensemble.n_features:
            raise ValueError("dimension mismatch")
        y = self.predict(x) if y_pred is None else int(y_pred)
        box = Box.around(x, eps, domain)
        if box.empty:
            raise ValueError("x lies outside the domain box")
        if warm_start is not None and box.contains(warm_start):
            pred = self.predict(warm_start)
            if pred != y:
                return self._done(VULNERABLE, start, np.asarray(warm_start, dtype=np.float64), pred, 0)
        verdict, z, pred, nodes = self._search(x, y, box, start)
        return self._done(verdict, start, z, pred, nodes)

    def _done(self, verdict, start, z, pred, nodes):
        wall = time.perf_counter() - start
        self.calls += 1
        self.seconds += wall
        return RobustnessResult(verdict, z, pred, nodes, wall)

    # -- branch and bound -----------------------------------------------------

    def _search(self, x, y, box, start):
        tab = self.table
        C = self.ensemble.n_classes
        rivals = np.array([c for c in range(C) if c != y])
        diff = tab.contrib[:, rivals] - tab.contrib[:, [y]]  # (L, R)
        base = tab.offset[rivals] - tab.offset[y]
        lo, hi = box.lo, box.hi
        idx = np.flatnonzero(np.all(tab.lo <= hi, axis=1) & np.all(tab.hi >= lo, axis=1))

        def assess(idx):
            tid = tab.tree[idx]
            starts = np.flatnonzero(np.r_[True, tid[1:] != tid[:-1]])
            ub = np.maximum.reduceat(diff[idx], starts, axis=0).sum(axis=0) + base
            return ub, len(starts) == len(idx)

        def settle(z, margin):
            # exact prediction decides anything the bounds cannot
            if np.all(margin < -_SLACK):
                return None
            pred = self.predict(z)
            return pred if pred != y else None

        deadline = None if self.time_limit is None else start + self.time_limit
        ub, cell = assess(idx)
        heap = []
        counter = 0
        if not np.all(ub < -_SLACK):
            heap.append((-float(ub.max()), counter, lo, hi, idx, ub, cell, None))
        nodes = 0
        while heap:
            _, _, lo, hi, idx, ub, cell, parent_probe = heapq.heappop(heap)
            nodes += 1
            if nodes > self.max_nodes or (deadline is not None and nodes % 64 == 0 and time.perf_counter() > deadline):
                return TIMEOUT, None, None, nodes
            z = np.minimum(np.maximum(x, lo), hi)
            if cell:
                pred = settle(z, ub)
                if pred is not None:
                    return VULNERABLE, z, pred, nodes
                continue
            if parent_probe is None or not np.array_equal(z, parent_probe):
                inside = np.all(tab.lo[idx] <= z, axis=1) & np.all(tab.hi[idx] >= z, axis=1)
                pred = settle(z, diff[idx[inside]].sum(axis=0) + base)
                if pred is not None:
                    return VULNERABLE, z, pred, nodes
            j, t = self._branch(idx, lo, hi)
            lhi = hi.copy()
            lhi[j] = t
            left = idx[tab.lo[idx, j] <= t]
            rlo = lo.copy()
            rlo[j] = np.nextafter(t, np.inf)
            right = idx[tab.hi[idx, j] >= rlo[j]]
            for clo, chi, cidx in ((lo, lhi, left), (rlo, hi, right)):
                cub, ccell = assess(cidx)
                if np.all(cub < -_SLACK):
                    continue
                counter += 1
                heapq.heappush(heap, (-float(cub.max()), counter, clo, chi, cidx, cub, ccell, z))
        return ROBUST, None, None, nodes

    def _branch(self, idx, lo, hi):
        """Threshold straddled by the box in the most trees.

        Ties go to the lowest feature, then the lowest threshold.
        """
        tab = self.table
        H = tab.hi[idx]
        rows, cols = np.nonzero((H < hi) & (H >= lo))
        keys = np.stack([cols.astype(np.float64), H[rows, cols], tab.tree[idx[rows]].astype(np.float64)], axis=1)
        keys = np.unique(keys, axis=0)
        pairs, counts = np.unique(keys[:, :2], axis=0, return_counts=True)
        k = np.lexsort((pairs[:, 1], pairs[:, 0], -counts))[0]
        return int(pairs[k, 0]), float(pairs[k, 1])

    # -- optimality via bisection ----------------------------------------------

    def minimal_distance(self, x, tol=1e-6, y_pred=None, warm_start=None):
        """Bracket the smallest l-infinity perturbation that changes the prediction.

        Bisection on ``eps`` over ``[0, 1]``; each vulnerable answer shrinks the
        upper end to the witness's own distance. Returns ``lo = 1`` and no
        witness when the whole unit box is robust.
        """
        if tol <= 0:
            raise ValueError("tol must be > 0")
        start = time.perf_counter()
        x = np.asarray(x, dtype=np.float64)
        y = self.predict(x) if y_pred is None else int(y_pred)
        checks = 0

        def bracket(lo, hi, w, complete):
            return DistanceBracket(lo, hi, w, complete, checks, time.perf_counter() - start)

        witness = None
        if warm_start is not None and self.predict(warm_start) != y:
            witness = np.asarray(warm_start, dtype=np.float64)
        if witness is None:
            res = self.check(x, 1.0, y)
            checks += 1
            if res.timeout:
                return bracket(0.0, np.inf, None, False)
            if res.robust:
                return bracket(1.0, np.inf, None, True)
            witness = res.witness
        lo, hi = 0.0, float(np.max(np.abs(witness - x)))
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            res = self.check(x, mid, y, warm_start=witness)
            checks += 1
            if res.timeout:
                return bracket(lo, hi, witness, False)
            if res.vulnerable:
                witness = res.witness
                hi = min(mid, float(np.max(np.abs(witness - x))))
            else:
                lo = mid
        return bracket(lo, hi, witness, True)


def check_robust(query, max_nodes=DEFAULT_MAX_NODES, time_limit=None):
    """Exact feasibility check for one :class:`Query`."""
    v = Verifier(query.ensemble, max_nodes=max_nodes, time_limit=time_limit, n_features=len(query.x))
    return v.check(query.x, query.eps, query.y_pred, query.warm_start, query.domain)


def minimal_distance(model, x, tol=1e-6, max_nodes=DEFAULT_MAX_NODES):
    return Verifier(model, max_nodes=max_nodes, n_features=len(x)).minimal_distance(x, tol)


class WitnessCache:
    """Per-sample smallest-distance witnesses; updates only ever improve."""

    def __init__(self):
        self._best = {}

    def get(self, key):
        item = self._best.get(key)
        return None if item is None else item[1]

    def distance(self, key):
        item = self._best.get(key)
        return np.inf if item is None else item[0]

    def offer(self, key, x, z):
        dist = float(np.max(np.abs(np.asarray(z) - np.asarray(x))))
        if dist < self.distance(key):
            self._best[key] = (dist, np.asarray(z, dtype=np.float64))
        return dist

    def __len__(self):
        return len(self._best)


def encode_labels(model, y):
    """Map labels to ensemble class indices when ``model`` is an estimator."""
    classes = getattr(model, "classes_", None)
    y = np.asarray(y)
    if classes is None:
        return y.astype(np.int64)
    return np.searchsorted(classes, y).astype(np.int64)


@dataclass
class RobustnessReport:
    accuracy: float
    adversarial_accuracy: float
    eps: float
    records: list = field(default_factory=list)
    n_timeouts: int = 0
    verify_seconds: float = 0.0

    @property
    def success_rate(self):
        if self.accuracy <= 0:
            raise ValueError("success rate undefined at zero accuracy")
        return 1.0 - self.adversarial_accuracy / self.accuracy


def evaluate_robustness(model, X, y, eps, max_nodes=DEFAULT_MAX_NODES, time_limit=None, cache=None):
    """Verify every sample; a sample counts when it is correct and ``eps``-robust.

    Misclassified samples are not verified. Timeouts count as not robust and
    are flagged in the records.
    """
    X = np.asarray(X, dtype=np.float64)
    y = encode_labels(model, y)
    v = Verifier(model, max_nodes=max_nodes, time_limit=time_limit, n_features=X.shape[1])
    pred = v.ensemble.predict(X) if len(X) else np.empty(0, dtype=np.int64)
    records = []
    n_good = 0
    n_timeouts = 0
    seconds = 0.0
    for i, (x, yi, pi) in enumerate(zip(X, y, pred)):
        rec = {"index": i, "label": int(yi), "prediction": int(pi), "correct": bool(pi == yi)}
        if pi != yi:
            rec.update(verdict="misclassified", nodes=0, wall_seconds=0.0)
            records.append(rec)
            continue
        warm = cache.get(i) if cache is not None else None
        res = v.check(x, eps, int(pi), warm_start=warm)
        if res.vulnerable and cache is not None:
            cache.offer(i, x, res.witness)
        seconds += res.wall_seconds
        n_good += res.robust
        n_timeouts += res.timeout
        rec.update(verdict=res.verdict, nodes=res.nodes_explored, wall_seconds=res.wall_seconds)
        records.append(rec)
    n = max(len(X), 1)
    acc = float(np.mean(pred == y)) if len(X) else 0.0
    return RobustnessReport(acc, n_good / n, eps, records, n_timeouts, seconds)


def adversarial_accuracy(model, X, y, eps, **kwargs):
    """Fraction of samples both correctly classified and ``eps``-robust."""
    return evaluate_robustness(model, X, y, eps, **kwargs).adversarial_accuracy


def success_rate(model, X, y, eps, **kwargs):
    """Adversarial success rate ``1 - AdvAcc / Acc``."""
    return evaluate_robustness(model, X, y, eps, **kwargs).success_rate
