"""Dataset ingestion, ordinal encoding, scaling, subsampling and splitting.

All functions here are pure: they never mutate their inputs and derive every
random draw from an explicit seed.
"""
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

NUMERIC = "numeric"
CATEGORICAL = "categorical"
_MISSING = {"", "?", "NA", "NaN", "nan"}


class DataError(ValueError):
    """Raised for malformed or unusable tabular input."""


@dataclass
class RawTable:
    rows: list
    columns: list  # [(name, kind)], target included with kind "target"
    target: str

    @property
    def feature_columns(self):
        return [(n, k) for n, k in self.columns if n != self.target]

    def column(self, name):
        j = [n for n, _ in self.columns].index(name)
        return [r[j] for r in self.rows]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    feature_names: list
    encoders: dict = field(default_factory=dict)  # column -> sorted categories
    classes: list = field(default_factory=list)  # original target labels
    scaler: tuple = None  # (mins, maxs) fitted on training rows
    name: str = ""

    @property
    def n_samples(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def decode(self, column, codes):
        cats = self.encoders[column]
        return [cats[int(c)] for c in codes]


@dataclass
class SplitIndices:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int
    test_seed: int = 0

    def to_dict(self):
        return {
            "train": self.train.tolist(),
            "valid": self.valid.tolist(),
            "test": self.test.tolist(),
            "seed": self.seed,
            "test_seed": self.test_seed,
        }


@dataclass
class DatasetManifest:
    name: str
    path: str
    target: str
    columns: dict = field(default_factory=dict)
    cap: int = 10000
    test_seed: int = 0
    rep_seeds: list = field(default_factory=lambda: list(range(7)))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        data_path = raw["path"]
        if not os.path.isabs(data_path):
            data_path = os.path.join(base, data_path)
        return cls(
            name=raw.get("name", os.path.splitext(os.path.basename(path))[0]),
            path=data_path,
            target=raw["target"],
            columns=dict(raw.get("columns", {})),
            cap=int(raw.get("cap", 10000)),
            test_seed=int(raw.get("test_seed", 0)),
            rep_seeds=list(raw.get("rep_seeds", range(7))),
        )


def load_csv(path, schema=None, target=None):
    """Read a delimited file with a header row into a :class:`RawTable`.

    ``schema`` maps column names to ``"numeric"`` or ``"categorical"``;
    unlisted feature columns are numeric. Missing cells are rejected.
    """
    schema = dict(schema or {})
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("no rows: file is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError("no rows")
    if target is None:
        target = header[-1]
    if target not in header:
        raise DataError(f"missing target column {target!r}")
    for name in schema:
        if name not in header:
            raise DataError(f"schema names unknown column {name!r}")

    columns = []
    for name in header:
        if name == target:
            columns.append((name, "target"))
        else:
            kind = schema.get(name, NUMERIC)
            if kind not in (NUMERIC, CATEGORICAL):
                raise DataError(f"unknown column kind {kind!r} for {name!r}")
            columns.append((name, kind))

    parsed = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(
                f"line {lineno}: arity mismatch, expected {len(header)} cells, got {len(row)}"
            )
        out = []
        for (name, kind), cell in zip(columns, row):
            cell = cell.strip()
            if cell in _MISSING:
                what = "target" if kind == "target" else "feature"
                raise DataError(f"line {lineno}: missing {what} value in column {name!r}")
            if kind == NUMERIC:
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"line {lineno}: unparseable numeric cell {cell!r} in column {name!r}"
                    ) from None
                if not math.isfinite(value):
                    raise DataError(f"line {lineno}: non-finite value in column {name!r}")
                out.append(value)
            else:
                out.append(cell)
        parsed.append(out)
    return RawTable(rows=parsed, columns=columns, target=target)


def _sorted_labels(values):
    uniq = set(values)
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return sorted(uniq)


def encode_ordinal(table, name=""):
    """Map categorical columns to integer codes in lexicographic category order.

    Target labels are ordered numerically when every label parses as a number
    and lexicographically otherwise, then coded ``0..C-1``.
    """
    feats = table.feature_columns
    n = len(table.rows)
    X = np.empty((n, len(feats)), dtype=np.float64)
    encoders = {}
    for j, (col, kind) in enumerate(feats):
        values = table.column(col)
        if kind == CATEGORICAL:
            cats = sorted(set(values))
            code = {c: i for i, c in enumerate(cats)}
            encoders[col] = cats
            X[:, j] = [code[v] for v in values]
        else:
            X[:, j] = values

    labels = [str(v) for v in table.column(table.target)]
    classes = _sorted_labels(labels)
    if len(classes) < 2:
        raise DataError("target needs at least two classes")
    code = {c: i for i, c in enumerate(classes)}
    y = np.array([code[v] for v in labels], dtype=np.int64)
    return Dataset(
        X=X,
        y=y,
        n_classes=len(classes),
        feature_names=[c for c, _ in feats],
        encoders=encoders,
        classes=classes,
        name=name,
    )


class MinMaxClamp(TransformerMixin, BaseEstimator):
    """Min-max scaling to ``[0, 1]`` with clamping of out-of-range values.

    Constant features map to 0.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        X = check_array(X, dtype=np.float64)
        span = self.data_max_ - self.data_min_
        safe = np.where(span > 0, span, 1.0)
        Z = (X - self.data_min_) / safe
        Z[:, span <= 0] = 0.0
        return np.clip(Z, 0.0, 1.0)


def normalize_minmax(d, train_idx):
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise DataError("train_idx must be non-empty")
    scaler = MinMaxClamp().fit(d.X[train_idx])
    return replace(
        d,
        X=scaler.transform(d.X),
        scaler=(scaler.data_min_.copy(), scaler.data_max_.copy()),
    )


def apply_scaler(X, scaler):
    mins, maxs = (np.asarray(a, dtype=np.float64) for a in scaler)
    span = maxs - mins
    safe = np.where(span > 0, span, 1.0)
    Z = (np.asarray(X, dtype=np.float64) - mins) / safe
    Z[:, span <= 0] = 0.0
    return np.clip(Z, 0.0, 1.0)


def largest_remainder(weights, total):
    """Integer apportionment of ``total`` proportional to ``weights``.

    Remainders are resolved toward the largest fractional part, ties toward the
    lowest index, so the result always sums to ``total``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    quota = w * (total / w.sum())
    base = np.floor(quota).astype(np.int64)
    rest = int(total - base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def log_ratio_targets(counts, cap):
    """Per-class sample targets proportional to ``ln(count)``, summing to ``cap``.

    Classes that run out of rows are fixed at their availability and the
    shortfall is redistributed over the others. A singleton class keeps its
    one row.
    """
    counts = np.asarray(counts, dtype=np.int64)
    cap = int(min(cap, counts.sum()))
    targets = np.zeros(len(counts), dtype=np.int64)
    fixed = np.zeros(len(counts), dtype=bool)
    singles = counts == 1
    targets[singles] = 1
    fixed |= singles | (counts == 0)
    while True:
        free = ~fixed
        budget = cap - int(targets[fixed].sum())
        if not free.any() or budget <= 0:
            break
        alloc = largest_remainder(np.log(counts[free].astype(np.float64)), budget)
        over = alloc > counts[free]
        if not over.any():
            targets[free] = alloc
            break
        free_idx = np.flatnonzero(free)
        targets[free_idx[over]] = counts[free_idx[over]]
        fixed[free_idx[over]] = True
    return targets


def subsample_log_ratio(d, cap=10000, seed=0):
    """Cap the dataset at ``cap`` rows, pushing the class ratio toward the log ratio."""
    if cap < d.n_classes:
        raise DataError("cap must be at least the number of classes")
    if d.n_samples <= cap:
        return d
    counts = np.bincount(d.y, minlength=d.n_classes)
    targets = log_ratio_targets(counts, cap)
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(d.n_classes):
        members = np.flatnonzero(d.y == c)
        keep.append(rng.choice(members, size=int(targets[c]), replace=False))
    idx = np.sort(np.concatenate(keep))
    return d.take(idx)


def _strata(y):
    classes, counts = np.unique(y, return_counts=True)
    strata = np.asarray(y).copy()
    small = classes[counts < 3]
    # classes too small to stratify share one pooled stratum
    strata[np.isin(strata, small)] = -1
    return strata


def _stratified_draw(pool, strata, size, rng):
    groups = np.unique(strata[pool])
    members = [pool[strata[pool] == g] for g in groups]
    alloc = largest_remainder([len(m) for m in members], size)
    picked = [rng.choice(m, size=int(k), replace=False) for m, k in zip(members, alloc)]
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)


def split_sizes(n):
    """``(train, valid, test)`` sizes: 20% test, then 20% of the rest for validation."""
    rest, n_test = largest_remainder((0.8, 0.2), n)
    n_train, n_valid = largest_remainder((0.8, 0.2), rest)
    return int(n_train), int(n_valid), int(n_test)


def split_64_20_20(d, test_seed=0, rep_seed=0):
    """Stratified train/valid/test split.

    The test rows depend only on the labels and ``test_seed``; ``rep_seed``
    only reshuffles the remaining rows between train and validation.
    """
    y = d.y if isinstance(d, Dataset) else np.asarray(d)
    n = len(y)
    if n < 5:
        raise DataError("need at least 5 samples to split")
    n_train, n_valid, n_test = split_sizes(n)
    strata = _strata(y)
    everything = np.arange(n)
    test = _stratified_draw(everything, strata, n_test, np.random.default_rng(test_seed))
    rest = np.setdiff1d(everything, test)
    valid = _stratified_draw(rest, strata, n_valid, np.random.default_rng(rep_seed))
    train = np.setdiff1d(rest, valid)
    return SplitIndices(train=train, valid=valid, test=test, seed=rep_seed, test_seed=test_seed)


def load_dataset(manifest, subsample_seed=None):
    """Load, encode and cap the dataset described by a manifest (unscaled)."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = DatasetManifest.load(manifest)
    table = load_csv(manifest.path, manifest.columns, manifest.target)
    d = encode_ordinal(table, name=manifest.name)
    seed = manifest.test_seed if subsample_seed is None else subsample_seed
    return subsample_log_ratio(d, manifest.cap, seed)


def prepare_split(d, split, merge_valid=False):
    """Scale on the training rows and return ``(train, valid, test)`` datasets.

    With ``merge_valid`` the validation rows join training (the 80/20 setting)
    and the returned validation dataset is empty.
    """
    train_idx = split.train
    valid_idx = split.valid
    if merge_valid:
        train_idx = np.sort(np.concatenate([split.train, split.valid]))
        valid_idx = np.empty(0, dtype=np.int64)
    scaled = normalize_minmax(d, train_idx)
    return scaled.take(train_idx), scaled.take(valid_idx), scaled.take(split.test)
