"""Standard and adversarially robust tree ensemble training.

Methods
-------
RF
    Random forest, Gini splits, soft voting.
GrootRF
    Forest whose splits minimise the exact worst-case Gini under an
    ``eps``-bounded adversary.
RobustRF
    Forest using the four-corner worst-case heuristic.
NoisyRF
    Random forest trained on uniformly perturbed copies of the data.
GBT
    Binary logistic gradient boosting with second-order gains.
RobustTrees
    Boosting whose gain is the worst case over the four corner routings.

Binary-only methods are lifted to multiclass problems one-vs-rest.
"""
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import criteria
from .trees import BOOSTED, FOREST, Ensemble, Tree

FOREST_METHODS = ("RF", "GrootRF", "RobustRF", "NoisyRF")
BOOSTED_METHODS = ("GBT", "RobustTrees")
METHODS = FOREST_METHODS + BOOSTED_METHODS
BINARY_ONLY = ("GrootRF", "RobustRF", "GBT", "RobustTrees")
# named report slots for methods trained outside this package
EXTERNAL_METHODS = ("Treant", "RobustBoost")

_CRITERION = {"RF": "gini", "NoisyRF": "gini", "GrootRF": "exact", "RobustRF": "heuristic4"}
_IMPROVEMENT = 1e-12


@dataclass
class TrainConfig:
    method: str = "RF"
    n_trees: int = 25
    max_depth: int = 5
    min_samples_split: int = 2
    feature_subsample: float = 0.5
    learning_rate: float = 0.3
    base_score: float = 0.0
    reg_lambda: float = 1.0
    epsilon: float = 0.0
    noise_radius: float = None  # defaults to epsilon
    noise_copies: int = 3
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- tree growing ------------------------------------------------------------


def _candidates(sv):
    """Midpoint thresholds between consecutive distinct sorted values."""
    u = np.unique(sv)
    if len(u) < 2:
        return u[:0]
    mid = (u[:-1] + u[1:]) / 2.0
    # adjacent doubles can round the midpoint up onto the larger value
    return np.where(mid < u[1:], mid, u[:-1])


def _n_features(frac, d):
    return max(1, min(d, int(round(frac * d))))


class _ClassificationBuilder:
    def __init__(self, criterion, max_depth, min_samples_split, feature_subsample, eps, n_classes, rng):
        if eps == 0:
            criterion = "gini"
        if criterion != "gini" and n_classes > 2:
            raise ValueError("robust splitting needs binary labels; use one-vs-rest")
        self.criterion = criterion
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.feature_subsample = feature_subsample
        self.eps = eps
        self.C = n_classes
        self.rng = rng

    def build(self, X, y):
        self.X, self.y = X, y
        self.nodes = []
        self._grow(np.arange(len(y)), 0)
        feat, thr, left, right, value = zip(*self.nodes)
        return Tree(feat, thr, left, right, np.array(value))

    def _leaf_value(self, counts):
        return (counts + 1.0) / (counts.sum() + self.C)

    def _grow(self, idx, depth):
        me = len(self.nodes)
        counts = np.bincount(self.y[idx], minlength=self.C)
        self.nodes.append([-1, 0.0, -1, -1, self._leaf_value(counts)])
        if depth >= self.max_depth or len(idx) < self.min_samples_split:
            return me
        split = self.best_split(idx, counts)
        if split is None:
            return me
        f, t, _ = split
        go_left = self.X[idx, f] <= t
        self.nodes[me][:2] = [f, t]
        self.nodes[me][2] = self._grow(idx[go_left], depth + 1)
        self.nodes[me][3] = self._grow(idx[~go_left], depth + 1)
        return me

    def best_split(self, idx, counts):
        d = self.X.shape[1]
        feats = np.sort(self.rng.choice(d, _n_features(self.feature_subsample, d), replace=False))
        parent = float(criteria.weighted_gini(counts, np.zeros_like(counts)))
        best = None
        for f in feats:
            vals = self.X[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            thr = _candidates(sv)
            if not len(thr):
                continue
            onehot = np.zeros((len(idx) + 1, self.C), dtype=np.int64)
            onehot[np.arange(1, len(idx) + 1), self.y[idx][order]] = 1
            cum = np.cumsum(onehot, axis=0)
            at = cum[np.searchsorted(sv, thr, side="right")]
            if self.criterion == "gini":
                scores = criteria.weighted_gini(at, counts - at)
            else:
                lo = cum[np.searchsorted(sv, thr - self.eps, side="right")]
                hi = cum[np.searchsorted(sv, thr + self.eps, side="right")]
                L, A, R, AL = lo, hi - lo, counts - hi, at - lo
                if self.criterion == "exact":
                    scores = criteria.exact_binary_scores(L, R, A)
                else:
                    scores = criteria.heuristic4_binary_scores(L, R, A, AL)
            k = int(np.argmin(scores))
            if best is None or scores[k] < best[2]:
                best = (int(f), float(thr[k]), float(scores[k]))
        if best is None or parent - best[2] <= _IMPROVEMENT:
            return None
        return best


class _GradientBuilder:
    def __init__(self, robust, max_depth, min_samples_split, feature_subsample, eps, reg_lambda, lr, rng):
        self.robust = robust and eps > 0
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.feature_subsample = feature_subsample
        self.eps = eps
        self.lam = reg_lambda
        self.lr = lr
        self.rng = rng

    def build(self, X, y, g, h):
        self.X, self.y, self.g, self.h = X, y, g, h
        self.nodes = []
        self._grow(np.arange(len(y)), 0)
        feat, thr, left, right, value = zip(*self.nodes)
        return Tree(feat, thr, left, right, np.array(value)[:, None])

    def _grow(self, idx, depth):
        me = len(self.nodes)
        G = self.g[idx].sum()
        H = self.h[idx].sum()
        self.nodes.append([-1, 0.0, -1, -1, -G / (H + self.lam) * self.lr])
        if depth >= self.max_depth or len(idx) < self.min_samples_split:
            return me
        split = self.best_split(idx, G, H)
        if split is None:
            return me
        f, t, _ = split
        go_left = self.X[idx, f] <= t
        self.nodes[me][:2] = [f, t]
        self.nodes[me][2] = self._grow(idx[go_left], depth + 1)
        self.nodes[me][3] = self._grow(idx[~go_left], depth + 1)
        return me

    def best_split(self, idx, G, H):
        d = self.X.shape[1]
        feats = np.sort(self.rng.choice(d, _n_features(self.feature_subsample, d), replace=False))
        best = None
        for f in feats:
            vals = self.X[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            thr = _candidates(sv)
            if not len(thr):
                continue
            gs, hs, ys = self.g[idx][order], self.h[idx][order], self.y[idx][order]
            cg = np.concatenate([[0.0], np.cumsum(gs)])
            ch = np.concatenate([[0.0], np.cumsum(hs)])
            at = np.searchsorted(sv, thr, side="right")
            GL, HL = cg[at], ch[at]
            if not self.robust:
                gains = criteria.xgb_gain(GL, HL, G - GL, H - HL, self.lam)
            else:
                lo = np.searchsorted(sv, thr - self.eps, side="right")
                hi = np.searchsorted(sv, thr + self.eps, side="right")
                per_g, per_h = [], []
                for c in (0, 1):
                    mask = ys == c
                    cgc = np.concatenate([[0.0], np.cumsum(np.where(mask, gs, 0.0))])
                    chc = np.concatenate([[0.0], np.cumsum(np.where(mask, hs, 0.0))])
                    per_g.append(cgc[hi] - cgc[lo])
                    per_h.append(chc[hi] - chc[lo])
                GA = np.stack(per_g, axis=-1)
                HA = np.stack(per_h, axis=-1)
                sure_gl, sure_hl = cg[lo], ch[lo]
                sure_gr, sure_hr = G - cg[hi], H - ch[hi]
                gains = criteria.robust_xgb_gain(
                    sure_gl, sure_hl, sure_gr, sure_hr, GA, HA,
                    GL - sure_gl, HL - sure_hl, self.lam,
                )
            k = int(np.argmax(gains))
            if best is None or gains[k] > best[2]:
                best = (int(f), float(thr[k]), float(gains[k]))
        if best is None or best[2] <= _IMPROVEMENT:
            return None
        return best


def _tree_rng(seed, k):
    # independent stream per tree: serial and parallel builds agree
    return np.random.default_rng([int(seed), int(k)])


def augment_noise(X, y, radius, copies, seed=0):
    """Append ``copies`` uniformly perturbed duplicates of every row.

    Noise is i.i.d. uniform in ``[-radius, radius]`` per feature and the result
    is clamped to ``[0, 1]``. Labels are copied.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if radius < 0 or copies < 0:
        raise ValueError("radius and copies must be non-negative")
    if copies == 0:
        return X.copy(), y.copy()
    rng = np.random.default_rng(seed)
    noisy = [np.clip(X + rng.uniform(-radius, radius, size=X.shape), 0.0, 1.0) for _ in range(copies)]
    return np.vstack([X] + noisy), np.concatenate([y] * (copies + 1))


def _grow_forest(X, y, n_classes, cfg, output_class=None):
    criterion = _CRITERION[cfg.method]
    trees = []
    n = len(y)
    for k in range(cfg.n_trees):
        rng = _tree_rng(cfg.seed, k)
        rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        builder = _ClassificationBuilder(
            criterion, cfg.max_depth, cfg.min_samples_split, cfg.feature_subsample,
            cfg.epsilon, n_classes, rng,
        )
        tree = builder.build(X[rows], y[rows])
        tree.output_class = output_class
        trees.append(tree)
    return trees


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _grow_boosted(X, y, cfg, output_class=None):
    robust = cfg.method == "RobustTrees"
    F = np.full(len(y), float(cfg.base_score))
    trees = []
    for k in range(cfg.n_trees):
        p = _sigmoid(F)
        g = p - y
        h = p * (1.0 - p)
        builder = _GradientBuilder(
            robust, cfg.max_depth, cfg.min_samples_split, cfg.feature_subsample,
            cfg.epsilon, cfg.reg_lambda, cfg.learning_rate, _tree_rng(cfg.seed, k),
        )
        tree = builder.build(X, y, g, h)
        tree.output_class = output_class
        F += tree.value[tree.apply(X), 0]
        trees.append(tree)
    return trees


def _fit_ensemble(X, y, n_classes, cfg):
    """Grow the ensemble for encoded labels ``y`` in ``0..n_classes-1``."""
    if len(y) == 0:
        raise ValueError("empty training split")
    if cfg.method == "NoisyRF":
        radius = cfg.epsilon if cfg.noise_radius is None else cfg.noise_radius
        X, y = augment_noise(X, y, radius, cfg.noise_copies, seed=cfg.seed)

    if cfg.method in FOREST_METHODS:
        if n_classes == 2 or cfg.method not in BINARY_ONLY:
            trees = _grow_forest(X, y, n_classes, cfg)
        else:
            trees = []
            for c in range(n_classes):
                trees += _grow_forest(X, (y == c).astype(np.int64), 2, cfg, output_class=c)
        return Ensemble(FOREST, trees, n_classes, n_features=X.shape[1])

    if n_classes == 2:
        trees = _grow_boosted(X, y.astype(np.float64), cfg)
        base = float(cfg.base_score)
    else:
        trees = []
        for c in range(n_classes):
            trees += _grow_boosted(X, (y == c).astype(np.float64), cfg, output_class=c)
        base = [float(cfg.base_score)] * n_classes
    return Ensemble(BOOSTED, trees, n_classes, base_score=base, n_features=X.shape[1])


# -- scikit-learn style estimators ---------------------------------------------


class _TreeEnsembleClassifier(ClassifierMixin, BaseEstimator):
    _method_choices = METHODS

    def _config(self):
        raise NotImplementedError

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        cfg = self._config()
        if cfg.method not in self._method_choices:
            raise ValueError(f"{type(self).__name__} does not train {cfg.method!r}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        n_classes = max(2, len(self.classes_))
        self.n_features_in_ = X.shape[1]
        start = time.perf_counter()
        ens = _fit_ensemble(X, encoded.astype(np.int64), n_classes, cfg)
        self.train_seconds_ = time.perf_counter() - start
        ens.meta = {"method": cfg.method, "config": cfg.to_dict(), "train_seconds": self.train_seconds_}
        self.ensemble_ = ens
        return self

    def decision_function(self, X):
        check_is_fitted(self, "ensemble_")
        X = check_array(X, dtype=np.float64)
        return self.ensemble_.decision_scores(X)

    def predict(self, X):
        idx = np.argmax(self.decision_function(X), axis=1)
        return self.classes_[idx] if len(self.classes_) > 1 else np.repeat(self.classes_, len(idx))


class RobustForestClassifier(_TreeEnsembleClassifier):
    """Random forest with a selectable (robust) splitting criterion.

    Parameters
    ----------
    method : {"RF", "GrootRF", "RobustRF", "NoisyRF"}
    n_trees : int
        Number of trees.
    max_depth : int
        Maximum tree depth; the root has depth 0.
    min_samples_split : int
        Nodes with fewer samples become leaves.
    feature_subsample : float
        Fraction of features drawn (without replacement) at every node.
    epsilon : float
        Training perturbation radius for the robust criteria and the default
        noise radius of NoisyRF.
    noise_copies : int
        Perturbed copies per row for NoisyRF.
    bootstrap : bool
        Grow each tree on a bootstrap resample.
    random_state : int
    """

    _method_choices = FOREST_METHODS

    def __init__(self, method="RF", n_trees=25, max_depth=5, min_samples_split=2,
                 feature_subsample=0.5, epsilon=0.0, noise_copies=3, noise_radius=None,
                 bootstrap=True, random_state=0):
        self.method = method
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.feature_subsample = feature_subsample
        self.epsilon = epsilon
        self.noise_copies = noise_copies
        self.noise_radius = noise_radius
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            method=self.method, n_trees=self.n_trees, max_depth=self.max_depth,
            min_samples_split=self.min_samples_split, feature_subsample=self.feature_subsample,
            epsilon=self.epsilon, noise_copies=self.noise_copies, noise_radius=self.noise_radius,
            bootstrap=self.bootstrap, seed=self.random_state,
        )

    def predict_proba(self, X):
        return self.decision_function(X)


class RobustBoostingClassifier(_TreeEnsembleClassifier):
    """Logistic gradient boosting, optionally with the worst-case corner gain.

    Parameters
    ----------
    method : {"GBT", "RobustTrees"}
    n_trees : int
        Boosting rounds (per class for multiclass problems).
    max_depth : int
    learning_rate : float
        Shrinkage applied to every leaf weight.
    base_score : float
        Initial logit.
    reg_lambda : float
        L2 penalty on leaf weights.
    epsilon : float
        Training perturbation radius (RobustTrees only).
    feature_subsample : float
    random_state : int
    """

    _method_choices = BOOSTED_METHODS

    def __init__(self, method="GBT", n_trees=25, max_depth=5, min_samples_split=2,
                 learning_rate=0.3, base_score=0.0, reg_lambda=1.0, epsilon=0.0,
                 feature_subsample=1.0, random_state=0):
        self.method = method
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.learning_rate = learning_rate
        self.base_score = base_score
        self.reg_lambda = reg_lambda
        self.epsilon = epsilon
        self.feature_subsample = feature_subsample
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            method=self.method, n_trees=self.n_trees, max_depth=self.max_depth,
            min_samples_split=self.min_samples_split, learning_rate=self.learning_rate,
            base_score=self.base_score, reg_lambda=self.reg_lambda, epsilon=self.epsilon,
            feature_subsample=self.feature_subsample, bootstrap=False, seed=self.random_state,
        )


def make_estimator(cfg):
    """Build the unfitted estimator described by a :class:`TrainConfig`."""
    if cfg.method in FOREST_METHODS:
        return RobustForestClassifier(
            method=cfg.method, n_trees=cfg.n_trees, max_depth=cfg.max_depth,
            min_samples_split=cfg.min_samples_split, feature_subsample=cfg.feature_subsample,
            epsilon=cfg.epsilon, noise_copies=cfg.noise_copies, noise_radius=cfg.noise_radius,
            bootstrap=cfg.bootstrap, random_state=cfg.seed,
        )
    return RobustBoostingClassifier(
        method=cfg.method, n_trees=cfg.n_trees, max_depth=cfg.max_depth,
        min_samples_split=cfg.min_samples_split, learning_rate=cfg.learning_rate,
        base_score=cfg.base_score, reg_lambda=cfg.reg_lambda, epsilon=cfg.epsilon,
        feature_subsample=cfg.feature_subsample, random_state=cfg.seed,
    )


def _train_arrays(d, splits):
    if splits is None:
        return d.X, d.y
    return d.X[splits.train], d.y[splits.train]


def fit_model(X, y, n_classes, cfg):
    """Train on encoded labels and return an :class:`Ensemble` with timing meta."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    start = time.perf_counter()
    ens = _fit_ensemble(X, y, n_classes, cfg)
    seconds = time.perf_counter() - start
    ens.meta = {"method": cfg.method, "config": cfg.to_dict(), "train_seconds": seconds}
    return ens


def fit_forest(d, splits, cfg):
    """Train a forest method on the training rows of dataset ``d``."""
    if cfg.method not in FOREST_METHODS:
        raise ValueError(f"{cfg.method!r} is not a forest method")
    X, y = _train_arrays(d, splits)
    return fit_model(X, y, d.n_classes, cfg)


def fit_gbt(d, splits, cfg):
    """Train a boosting method on the training rows of dataset ``d``."""
    if cfg.method not in BOOSTED_METHODS:
        raise ValueError(f"{cfg.method!r} is not a boosting method")
    X, y = _train_arrays(d, splits)
    return fit_model(X, y, d.n_classes, cfg)


def fit_ovr(d, splits, cfg):
    """One binary model per class sharing ``cfg``; argmax of positive scores.

    Two-class problems get a single binary model.
    """
    X, y = _train_arrays(d, splits)
    if d.n_classes == 2:
        return fit_model(X, y, 2, cfg)
    start = time.perf_counter()
    trees = []
    for c in range(d.n_classes):
        part = _fit_ensemble(X, (y == c).astype(np.int64), 2, cfg)
        for t in part.trees:
            t.output_class = c
        trees += part.trees
    kind = FOREST if cfg.method in FOREST_METHODS else BOOSTED
    base = [float(cfg.base_score)] * d.n_classes if kind == BOOSTED else 0.0
    ens = Ensemble(kind, trees, d.n_classes, base_score=base, n_features=X.shape[1])
    ens.meta = {
        "method": cfg.method,
        "config": cfg.to_dict(),
        "train_seconds": time.perf_counter() - start,
        "ovr": True,
    }
    return ens


def with_seed(cfg, seed):
    return replace(cfg, seed=int(seed))
