"""Split criteria: Gini impurity and its adversarial (worst-case) variants.

A sample with feature value ``v`` is *ambiguous* for threshold ``t`` under a
training radius ``eps`` when ``t - eps < v <= t + eps``; the adversary may route
it to either side. Samples of one class are interchangeable, so an adversarial
routing is fully described by how many ambiguous samples of each class go left.

Every score here is computed through :func:`weighted_gini` so that a zero
radius reproduces the standard criterion bit for bit.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class SplitStats:
    left: np.ndarray  # per-class counts surely routed left
    right: np.ndarray  # per-class counts surely routed right
    ambiguous: np.ndarray  # per-class counts inside the band
    threshold: float = 0.0
    feature: int = 0
    # ambiguous samples whose clean value routes left; None when unknown
    ambiguous_left: np.ndarray = None

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.ambiguous = np.asarray(self.ambiguous, dtype=np.int64)
        if self.ambiguous_left is not None:
            self.ambiguous_left = np.asarray(self.ambiguous_left, dtype=np.int64)
            if np.any(self.ambiguous_left > self.ambiguous) or np.any(self.ambiguous_left < 0):
                raise ValueError("ambiguous_left must lie within [0, ambiguous]")
        if np.any(self.left < 0) or np.any(self.right < 0) or np.any(self.ambiguous < 0):
            raise ValueError("counts must be non-negative")

    @property
    def totals(self):
        return self.left + self.right + self.ambiguous

    @property
    def n_classes(self):
        return len(self.left)

    @classmethod
    def from_values(cls, values, labels, threshold, eps, n_classes=None, feature=0):
        """Tally a single feature column against ``threshold`` with band ``eps``."""
        values = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        C = int(labels.max()) + 1 if n_classes is None else n_classes
        left = values <= threshold - eps
        right = values > threshold + eps
        amb = ~(left | right)
        return cls(
            left=np.bincount(labels[left], minlength=C),
            right=np.bincount(labels[right], minlength=C),
            ambiguous=np.bincount(labels[amb], minlength=C),
            threshold=threshold,
            feature=feature,
            ambiguous_left=np.bincount(labels[amb & (values <= threshold)], minlength=C),
        )


def gini(counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def weighted_gini(left, right):
    """Size-weighted Gini of a two-way split; broadcasts over leading axes.

    ``left`` and ``right`` hold per-class counts along the last axis. An empty
    side contributes nothing.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    nl = left.sum(axis=-1)
    nr = right.sum(axis=-1)
    n = nl + nr
    with np.errstate(invalid="ignore", divide="ignore"):
        il = np.where(nl > 0, nl - np.sum(left * left, axis=-1) / nl, 0.0)
        ir = np.where(nr > 0, nr - np.sum(right * right, axis=-1) / nr, 0.0)
        out = np.where(n > 0, (il + ir) / n, 0.0)
    return out


def _check_node(s):
    if s.totals.sum() <= 0:
        raise ValueError("split statistics of an empty node")


def robust_split_score_exact(s):
    """Worst-case weighted Gini over every per-class routing of ambiguous samples.

    Enumerates all ``prod(k_c + 1)`` allocations. Lower is better.
    """
    _check_node(s)
    k = s.ambiguous
    grids = np.indices(tuple(k + 1)).reshape(len(k), -1).T  # (allocations, C)
    left = s.left[None, :] + grids
    right = s.right[None, :] + (k[None, :] - grids)
    return float(np.max(weighted_gini(left, right)))


def corner_allocations(s):
    """Ambiguous-left allocations inspected by the four-corner heuristic.

    All left, all right, class 0 left with class 1 right, and the reverse. The
    unperturbed routing is added when ``ambiguous_left`` is known, so the
    heuristic never scores a split better than the clean split.
    """
    k = s.ambiguous
    z = np.zeros_like(k)
    allocs = [k, z, np.array([k[0], 0]), np.array([0, k[1]])]
    if s.ambiguous_left is not None:
        allocs.append(s.ambiguous_left)
    return np.array(allocs)


def robust_split_score_heuristic4(s):
    """Worst case over the corner allocations only; binary problems."""
    _check_node(s)
    if s.n_classes > 2:
        raise ValueError("the four-corner heuristic needs binary labels; use one-vs-rest")
    allocs = corner_allocations(s)
    left = s.left[None, :] + allocs
    right = s.right[None, :] + (s.ambiguous[None, :] - allocs)
    return float(np.max(weighted_gini(left, right)))


def standard_split_score(s):
    """Weighted Gini of the unperturbed routing (needs ``ambiguous_left``)."""
    _check_node(s)
    al = s.ambiguous_left if s.ambiguous_left is not None else np.zeros_like(s.ambiguous)
    return float(weighted_gini(s.left + al, s.right + s.ambiguous - al))


# -- vectorised scoring over many candidate thresholds (binary labels) -------


def exact_binary_scores(L, R, A):
    """Exact worst-case weighted Gini for many candidates at once.

    ``L``, ``R``, ``A`` have shape ``(m, 2)``. For a fixed number of ambiguous
    class-0 samples sent left, the objective is concave in the class-1 count,
    so its integer maximum sits at the floor or ceiling of the stationary
    point. Enumerating the smaller class keeps the work at ``O(m * min k)``.
    """
    L = np.asarray(L, dtype=np.int64)
    R = np.asarray(R, dtype=np.int64)
    A = np.asarray(A, dtype=np.int64)
    if A[:, 0].max(initial=0) > A[:, 1].max(initial=0):
        perm = [1, 0]
        L, R, A = L[:, perm], R[:, perm], A[:, perm]
    m = L.shape[0]
    kmax = int(A[:, 0].max(initial=0))
    a0 = np.arange(kmax + 1)[None, :].repeat(m, axis=0)  # (m, K)
    valid = a0 <= A[:, :1]
    a0 = np.minimum(a0, A[:, :1])
    l0 = L[:, :1] + a0
    r0 = R[:, :1] + A[:, :1] - a0
    denom = l0 + r0
    with np.errstate(invalid="ignore", divide="ignore"):
        star = np.where(denom > 0, (l0 * (R[:, 1:] + A[:, 1:]) - r0 * L[:, 1:]) / denom, 0.0)
    star = np.clip(star, 0, A[:, 1:])
    best = np.full(m, -np.inf)
    for a1 in (np.floor(star), np.ceil(star)):
        a1 = a1.astype(np.int64)
        left = np.stack([l0, L[:, 1:] + a1], axis=-1)
        right = np.stack([r0, R[:, 1:] + A[:, 1:] - a1], axis=-1)
        score = np.where(valid, weighted_gini(left, right), -np.inf)
        best = np.maximum(best, score.max(axis=1))
    return best


def heuristic4_binary_scores(L, R, A, AL):
    """Four-corner (plus clean routing) worst case for many candidates."""
    L = np.asarray(L, dtype=np.int64)
    R = np.asarray(R, dtype=np.int64)
    A = np.asarray(A, dtype=np.int64)
    z = np.zeros_like(A[:, 0])
    allocs = [
        A,
        np.zeros_like(A),
        np.stack([A[:, 0], z], axis=1),
        np.stack([z, A[:, 1]], axis=1),
        np.asarray(AL, dtype=np.int64),
    ]
    best = np.full(L.shape[0], -np.inf)
    for a in allocs:
        best = np.maximum(best, weighted_gini(L + a, R + A - a))
    return best


def xgb_gain(GL, HL, GR, HR, reg_lambda=1.0):
    """Second-order split gain with L2-regularised leaf weights."""
    G = GL + GR
    H = HL + HR
    return 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda) - G * G / (H + reg_lambda))


def robust_xgb_gain(GL, HL, GR, HR, GA, HA, GAL, HAL, reg_lambda=1.0):
    """Worst-case gain over the corner routings of ambiguous samples.

    ``GA``/``HA`` hold per-class gradient and hessian sums of the ambiguous
    samples with shape ``(..., 2)``; ``GAL``/``HAL`` are their clean-left
    totals. Surely-routed sums are ``GL``/``HL`` and ``GR``/``HR``. The clean
    routing is one of the cases, so the result never exceeds the standard gain.
    """
    GA = np.asarray(GA, dtype=np.float64)
    HA = np.asarray(HA, dtype=np.float64)
    ga = GA.sum(axis=-1)
    ha = HA.sum(axis=-1)
    cases = [
        (ga, ha),
        (0.0 * ga, 0.0 * ha),
        (GA[..., 0], HA[..., 0]),
        (GA[..., 1], HA[..., 1]),
        (GAL, HAL),
    ]
    worst = None
    for gl, hl in cases:
        gain = xgb_gain(GL + gl, HL + hl, GR + (ga - gl), HR + (ha - hl), reg_lambda)
        worst = gain if worst is None else np.minimum(worst, gain)
    return worst
