"""Independent reference implementations used only by the tests.

Nothing here shares code with the branch-and-bound search or the vectorised
split scoring it checks.
"""
import itertools

import numpy as np

from treeguard.trees import BOOSTED, FOREST, Ensemble, Tree


def brute_force_adversary(left, right, ambiguous):
    """Worst weighted Gini over every per-sample routing of ambiguous samples.

    Enumerates all ``2^k`` left/right masks of the ``k`` ambiguous samples
    individually (no class interchangeability is assumed).
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    labels = np.repeat(np.arange(len(left)), ambiguous)
    k = len(labels)
    masks = (np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1  # (2^k, k)
    onehot = np.eye(len(left))[labels] if k else np.zeros((0, len(left)))
    moved = masks @ onehot  # per-class counts sent left
    lc = left[None, :] + moved
    rc = right[None, :] + onehot.sum(axis=0)[None, :] - moved
    n = lc.sum(axis=1) + rc.sum(axis=1)
    total = np.zeros(len(masks))
    for side in (lc, rc):
        m = side.sum(axis=1)
        safe = np.where(m > 0, m, 1.0)
        imp = 1.0 - np.sum((side / safe[:, None]) ** 2, axis=1)
        total += np.where(m > 0, m / n * imp, 0.0)
    return float(total.max())


def _intervals(lo, hi, cuts):
    """Pieces ``[lo, c1], (c1, c2], ..., (ck, hi]`` as ``(a, b, a_open)``."""
    cuts = sorted(c for c in set(cuts) if lo <= c < hi)
    edges = [lo] + cuts + [hi]
    out = []
    for k in range(len(edges) - 1):
        out.append((edges[k], edges[k + 1], k > 0))
    if not cuts and lo == hi:
        out = [(lo, hi, False)]
    return out


def _representative(a, b, a_open, x):
    if x > b:
        return b
    if x > a or (x == a and not a_open):
        return x
    return np.nextafter(a, np.inf) if a_open else a


def _feature_cuts(ens, d):
    cuts = [[] for _ in range(d)]
    for t in ens.trees:
        for f, th in zip(t.feature, t.threshold):
            if f >= 0:
                cuts[f].append(float(th))
    return cuts


def _cells(ens, x, lo, hi):
    d = len(x)
    cuts = _feature_cuts(ens, d)
    per_feature = [_intervals(lo[j], hi[j], cuts[j]) for j in range(d)]
    for combo in itertools.product(*per_feature):
        yield combo


def cell_enumeration_robust(ens, x, eps, y=None):
    """Exhaustive check over every grid cell meeting the eps-ball.

    Returns ``(robust, witness)``.
    """
    x = np.asarray(x, dtype=float)
    y = ens.predict_one(x) if y is None else y
    lo = np.maximum(x - eps, 0.0)
    hi = np.minimum(x + eps, 1.0)
    combos = list(_cells(ens, x, lo, hi))
    pts = np.array([[_representative(a, b, o, x[j]) for j, (a, b, o) in enumerate(c)] for c in combos])
    preds = ens.predict(pts)
    bad = np.flatnonzero(preds != y)
    if len(bad):
        return False, pts[bad[0]]
    return True, None


def exact_minimal_distance(ens, x, y=None):
    """Infimum l-inf distance from ``x`` to a differently classified point of the unit box.

    ``inf`` when the prediction is constant on the unit box.
    """
    x = np.asarray(x, dtype=float)
    y = ens.predict_one(x) if y is None else y
    d = len(x)
    combos = list(_cells(ens, x, np.zeros(d), np.ones(d)))
    pts = np.array([[_representative(a, b, o, x[j]) for j, (a, b, o) in enumerate(c)] for c in combos])
    preds = ens.predict(pts)
    best = np.inf
    for combo, p in zip(combos, preds):
        if p == y:
            continue
        dist = max(max(a - x[j], x[j] - b, 0.0) for j, (a, b, _) in enumerate(combo))
        best = min(best, dist)
    return best


def random_tree(rng, depth, d, leaf_fn, grid=None):
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(level):
        me = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_fn())
        if level < depth and rng.random() < 0.85:
            f = int(rng.integers(d))
            t = float(rng.choice(grid)) if grid is not None and rng.random() < 0.5 else float(rng.uniform(0.02, 0.98))
            feature[me], threshold[me] = f, t
            left[me] = grow(level + 1)
            right[me] = grow(level + 1)
        return me

    grow(0)
    return Tree(feature, threshold, left, right, np.array(value))


def random_ensemble(rng, max_trees=5, max_depth=3, max_features=3, n_classes=2, kind=None):
    kind = kind or (FOREST if rng.random() < 0.5 else BOOSTED)
    T = int(rng.integers(1, max_trees + 1))
    depth = int(rng.integers(1, max_depth + 1))
    d = int(rng.integers(1, max_features + 1))
    grid = np.round(np.arange(0.1, 1.0, 0.1), 10)
    if kind == FOREST:
        trees = [random_tree(rng, depth, d, lambda: rng.dirichlet(np.ones(n_classes)), grid) for _ in range(T)]
        return Ensemble(FOREST, trees, n_classes, n_features=d)
    if n_classes == 2:
        trees = [random_tree(rng, depth, d, lambda: [rng.normal()], grid) for _ in range(T)]
        return Ensemble(BOOSTED, trees, 2, base_score=float(rng.normal(scale=0.3)), n_features=d)
    trees = []
    for c in range(n_classes):
        for _ in range(T):
            t = random_tree(rng, depth, d, lambda: [rng.normal()], grid)
            t.output_class = c
            trees.append(t)
    return Ensemble(BOOSTED, trees, n_classes, base_score=[0.0] * n_classes, n_features=d)


def random_point(rng, ens, d):
    x = rng.uniform(0, 1, d)
    # sometimes sit exactly on a threshold to exercise the closed-left rule
    cuts = _feature_cuts(ens, d)
    for j in range(d):
        if cuts[j] and rng.random() < 0.2:
            x[j] = rng.choice(cuts[j])
    return x
