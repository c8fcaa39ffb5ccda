"""Axis-aligned decision trees, ensembles and box reachability.

Routing convention everywhere: a sample goes left iff ``x[feature] <= threshold``.
A right child therefore covers the half-open interval ``(threshold, hi]``; in
floating point that is the closed interval ``[nextafter(threshold, +inf), hi]``,
which is how boxes store it.
"""
import json
from dataclasses import dataclass, field

import numpy as np

FOREST = "forest"
BOOSTED = "boosted"
FORMAT_VERSION = 1


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def unit(cls, d):
        return cls(np.zeros(d), np.ones(d))

    @classmethod
    def around(cls, x, eps, domain=(0.0, 1.0)):
        """The l-infinity ball of radius ``eps`` around ``x`` clipped to the domain."""
        x = np.asarray(x, dtype=np.float64)
        lo = x - eps
        hi = x + eps
        # rounding must never widen the ball
        lo = np.where(x - lo > eps, np.nextafter(lo, np.inf), lo)
        hi = np.where(hi - x > eps, np.nextafter(hi, -np.inf), hi)
        return cls(np.maximum(lo, domain[0]), np.minimum(hi, domain[1]))

    @property
    def empty(self):
        return bool(np.any(self.lo > self.hi))

    def intersect(self, other):
        return Box(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def contains(self, z):
        z = np.asarray(z)
        return bool(np.all(self.lo <= z) and np.all(z <= self.hi))

    def closest_point(self, x):
        return np.minimum(np.maximum(x, self.lo), self.hi)

    def copy(self):
        return Box(self.lo.copy(), self.hi.copy())


class Tree:
    """Array-backed binary tree.

    ``feature[i] < 0`` marks a leaf. ``value`` has one row per node: a class
    distribution for forest trees, a single logit for boosted trees.
    ``output_class`` is set for one-vs-rest and boosted trees whose output feeds
    a single class score.
    """

    def __init__(self, feature, threshold, left, right, value, output_class=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        value = np.asarray(value, dtype=np.float64)
        self.value = value.reshape(len(self.feature), -1)
        self.output_class = output_class
        self._leaf_boxes = None

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def leaves(self):
        return np.flatnonzero(self.feature < 0)

    @property
    def max_depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X):
        """Leaf id reached by every row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        rows = np.arange(X.shape[0])
        while active.size:
            n = node[active]
            go_left = X[rows[active], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return node

    def leaf_boxes(self):
        """Leaf ids with their routing regions as ``(ids, lo, hi)`` arrays.

        Regions are unbounded where no ancestor constrains a feature.
        """
        if self._leaf_boxes is None:
            d = int(self.feature.max()) + 1 if self.feature.max() >= 0 else 0
            ids, los, his = [], [], []
            stack = [(0, np.full(d, -np.inf), np.full(d, np.inf))]
            while stack:
                i, lo, hi = stack.pop()
                f = self.feature[i]
                if f < 0:
                    ids.append(i)
                    los.append(lo)
                    his.append(hi)
                    continue
                t = self.threshold[i]
                rlo = lo.copy()
                rlo[f] = max(rlo[f], np.nextafter(t, np.inf))
                lhi = hi.copy()
                lhi[f] = min(lhi[f], t)
                stack.append((self.right[i], rlo, hi))
                stack.append((self.left[i], lo, lhi))
            order = np.argsort(ids)
            self._leaf_boxes = (
                np.asarray(ids, dtype=np.int64)[order],
                np.asarray(los).reshape(len(ids), d)[order],
                np.asarray(his).reshape(len(ids), d)[order],
            )
        return self._leaf_boxes

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": [repr(float(t)) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "output_class": self.output_class,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["feature"],
            [float(t) for t in d["threshold"]],
            d["left"],
            d["right"],
            d["value"],
            d.get("output_class"),
        )

    @classmethod
    def leaf(cls, value, output_class=None):
        return cls([-1], [0.0], [-1], [-1], [value], output_class)


def reachable_leaves(tree, box):
    """Leaves whose routing region meets ``box``, each with the intersected box."""
    out = []
    stack = [(0, box.lo.copy(), box.hi.copy())]
    while stack:
        i, lo, hi = stack.pop()
        f = tree.feature[i]
        if f < 0:
            out.append((int(i), Box(lo, hi)))
            continue
        t = tree.threshold[i]
        if lo[f] <= t:
            lhi = hi.copy()
            lhi[f] = min(hi[f], t)
            stack.append((tree.left[i], lo, lhi))
        if hi[f] > t:
            rlo = lo.copy()
            rlo[f] = max(lo[f], np.nextafter(t, np.inf))
            stack.append((tree.right[i], rlo, hi))
    out.sort(key=lambda item: item[0])
    return out


@dataclass
class LeafTable:
    """All leaves of an ensemble flattened into aligned arrays.

    Rows are grouped by tree (ascending) so per-tree reductions can use
    ``np.maximum.reduceat``.
    """

    lo: np.ndarray  # (L, d)
    hi: np.ndarray  # (L, d)
    tree: np.ndarray  # (L,)
    contrib: np.ndarray  # (L, C) contribution to each class score
    offset: np.ndarray  # (C,)
    n_trees: int


class Ensemble:
    """A forest (soft vote) or an additive boosted ensemble.

    Class scores are ``offset + sum_t contribution_t(leaf_t(x))``; the
    prediction is the argmax with ties toward the lowest class. Binary boosted
    ensembles put the summed logit plus ``base_score`` on class 1 and zero on
    class 0, so class 1 wins iff the total logit is strictly positive.
    """

    def __init__(self, kind, trees, n_classes, base_score=0.0, meta=None, n_features=None):
        if kind not in (FOREST, BOOSTED):
            raise ValueError(f"unknown ensemble kind {kind!r}")
        if not trees:
            raise ValueError("an ensemble needs at least one tree")
        self.kind = kind
        self.trees = list(trees)
        self.n_classes = int(n_classes)
        self.base_score = base_score
        self.meta = dict(meta or {})
        if n_features is None:
            n_features = max(int(t.feature.max()) for t in self.trees) + 1
        self.n_features = int(n_features)
        self._contribs = None
        self._table = None

    def __len__(self):
        return len(self.trees)

    @property
    def offset(self):
        off = np.zeros(self.n_classes)
        if self.kind == BOOSTED:
            base = np.atleast_1d(np.asarray(self.base_score, dtype=np.float64))
            if base.size == 1 and self.n_classes == 2:
                off[1] = base[0]
            else:
                off[:] = base
        return off

    def contributions(self):
        """Per tree, an ``(n_nodes, C)`` array of class-score contributions."""
        if self._contribs is None:
            stack_size = {}
            for t in self.trees:
                stack_size[t.output_class] = stack_size.get(t.output_class, 0) + 1
            out = []
            for t in self.trees:
                c = np.zeros((t.n_nodes, self.n_classes))
                if self.kind == FOREST:
                    scale = 1.0 / stack_size[t.output_class]
                    if t.output_class is None:
                        c[:, : t.value.shape[1]] = t.value * scale
                    else:
                        c[:, t.output_class] = t.value[:, 1] * scale
                else:
                    cls = 1 if t.output_class is None else t.output_class
                    c[:, cls] = t.value[:, 0]
                out.append(c)
            self._contribs = out
        return self._contribs

    def decision_scores(self, X):
        """Class scores, summed tree by tree in ensemble order."""
        X = self._check_X(X)
        scores = np.tile(self.offset, (X.shape[0], 1))
        for t, c in zip(self.trees, self.contributions()):
            scores += c[t.apply(X)]
        return scores

    def predict(self, X):
        return np.argmax(self.decision_scores(X), axis=1)

    def predict_one(self, x):
        return int(self.predict(np.asarray(x, dtype=np.float64)[None, :])[0])

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] < self.n_features:
            raise ValueError(
                f"dimension mismatch: ensemble uses {self.n_features} features, got {X.shape[1]}"
            )
        return X

    def leaf_table(self, d=None):
        d = self.n_features if d is None else d
        if self._table is None or self._table.lo.shape[1] != d:
            los, his, tids, cons = [], [], [], []
            for k, (t, c) in enumerate(zip(self.trees, self.contributions())):
                ids, lo, hi = t.leaf_boxes()
                full_lo = np.full((len(ids), d), -np.inf)
                full_hi = np.full((len(ids), d), np.inf)
                full_lo[:, : lo.shape[1]] = lo
                full_hi[:, : hi.shape[1]] = hi
                los.append(full_lo)
                his.append(full_hi)
                tids.append(np.full(len(ids), k, dtype=np.int64))
                cons.append(c[ids])
            self._table = LeafTable(
                lo=np.vstack(los),
                hi=np.vstack(his),
                tree=np.concatenate(tids),
                contrib=np.vstack(cons),
                offset=self.offset,
                n_trees=len(self.trees),
            )
        return self._table

    def thresholds(self):
        """Sorted distinct thresholds per feature."""
        out = {}
        for t in self.trees:
            for f, th in zip(t.feature, t.threshold):
                if f >= 0:
                    out.setdefault(int(f), set()).add(float(th))
        return {f: sorted(v) for f, v in sorted(out.items())}

    def to_dict(self, include_times=True):
        meta = dict(self.meta)
        if not include_times:
            meta = {k: v for k, v in meta.items() if "seconds" not in k}
        base = self.base_score
        if isinstance(base, np.ndarray):
            base = base.tolist()
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "base_score": base,
            "meta": meta,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')}")
        return cls(
            d["kind"],
            [Tree.from_dict(t) for t in d["trees"]],
            d["n_classes"],
            d.get("base_score", 0.0),
            d.get("meta", {}),
            d.get("n_features"),
        )

    def dumps(self, include_times=True):
        return json.dumps(self.to_dict(include_times), sort_keys=True, indent=1)

    def save(self, path, include_times=True):
        with open(path, "w") as fh:
            fh.write(self.dumps(include_times))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def as_ensemble(model):
    """Accept either an :class:`Ensemble` or a fitted estimator wrapping one."""
    if isinstance(model, Ensemble):
        return model
    ens = getattr(model, "ensemble_", None)
    if ens is None:
        raise TypeError(f"{type(model).__name__} is not a fitted tree ensemble")
    return ens


def predict(model, x):
    """Predicted class of a single feature vector."""
    return as_ensemble(model).predict_one(x)


def score_bounds(model, box):
    """Per-class ``(lower, upper)`` score bounds over every point of ``box``."""
    e = as_ensemble(model)
    if box.empty:
        raise ValueError("score bounds of an empty box")
    lower = e.offset.copy()
    upper = e.offset.copy()
    for t, c in zip(e.trees, e.contributions()):
        ids = [i for i, _ in reachable_leaves(t, box)]
        vals = c[ids]
        lower += vals.min(axis=0)
        upper += vals.max(axis=0)
    return lower, upper
