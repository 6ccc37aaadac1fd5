# learner.py — gradient-boosted trees (softmax objective), balanced class weights, grid-search CV

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import ParameterGrid, StratifiedKFold

from evalcal import f1_from_labels
from models import HyperParams, LearnerError, ParamGrid
from utils import derive_seed
from workers import run_bounded

log = logging.getLogger(__name__)

MIN_HESS = 1e-16
MIN_GAIN = 1e-12
TIE_RTOL = 1e-12

ArrayLike = Union[np.ndarray, pd.DataFrame]


# ── trees ─────────────────────────────────────────────────────────────────────

def split_point(lo: float, hi: float) -> float:
    """Cut halfway between adjacent training values lo < hi; always lo <= cut < hi."""
    mid = lo + (hi - lo) / 2.0
    return mid if lo <= mid < hi else lo


@dataclass(frozen=True)
class RegressionTree:
    """Flat node arrays; feature -1 marks a leaf. Rows with x[feature] <= threshold go left."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def to_dict(self) -> Dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(v) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


class _TreeBuilder:
    def __init__(self, X: np.ndarray, g: np.ndarray, h: np.ndarray, hp: HyperParams):
        self.X, self.g, self.h, self.hp = X, g, h, hp
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new(self) -> int:
        for arr, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            arr.append(v)
        return len(self.feature) - 1

    def _best_split(self, idx: np.ndarray) -> Optional[Tuple[int, float, np.ndarray]]:
        lam, mcw = self.hp.l2_reg, self.hp.min_child_weight
        Xn = self.X[idx]
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        cg = np.cumsum(self.g[idx][order], axis=0)
        ch = np.cumsum(self.h[idx][order], axis=0)
        G, H = cg[-1], ch[-1]
        GL, HL = cg[:-1], ch[:-1]
        GR, HR = G - GL, H - HL
        gain = GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam)
        ok = (xs[1:] > xs[:-1]) & (HL >= mcw) & (HR >= mcw)
        gain = np.where(ok, gain, -np.inf)

        best = None
        best_gain = MIN_GAIN
        # canonical feature order; a later feature wins only on a clear improvement
        for f in range(Xn.shape[1]):
            pos = int(np.argmax(gain[:, f]))
            gf = float(gain[pos, f])
            if gf > best_gain + TIE_RTOL * abs(best_gain):
                best_gain = gf
                best = (f, split_point(float(xs[pos, f]), float(xs[pos + 1, f])))
        if best is None:
            return None
        f, thr = best
        return f, thr, self.X[idx, f] <= thr

    def grow(self, idx: np.ndarray, depth: int) -> int:
        node = self._new()
        split = self._best_split(idx) if depth < self.hp.max_depth and idx.size > 1 else None
        if split is None:
            G, H = float(np.sum(self.g[idx])), float(np.sum(self.h[idx]))
            self.value[node] = -G / (H + self.hp.l2_reg) * self.hp.learning_rate
            return node
        f, thr, go_left = split
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self.grow(idx[go_left], depth + 1)
        self.right[node] = self.grow(idx[~go_left], depth + 1)
        return node

    def build(self, idx: np.ndarray) -> RegressionTree:
        self.grow(idx, 0)
        return RegressionTree(
            np.asarray(self.feature, dtype=np.int64), np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.left, dtype=np.int64), np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )


# ── ensemble ──────────────────────────────────────────────────────────────────

def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class BoostedEnsemble:
    n_classes: int
    trees: Tuple[Tuple[RegressionTree, ...], ...]      # rounds × classes
    base_score: np.ndarray
    feature_names: Tuple[str, ...]
    hyperparams: HyperParams = field(default_factory=HyperParams)
    seed: int = 0
    loss_history: Tuple[float, ...] = ()

    def _matrix(self, rows) -> np.ndarray:
        if isinstance(rows, Mapping):
            rows = pd.DataFrame([rows])
        if isinstance(rows, pd.DataFrame):
            missing = [f for f in self.feature_names if f not in rows.columns]
            if missing:
                raise LearnerError(f"missing features: {missing[:5]}{'…' if len(missing) > 5 else ''}")
            return rows[list(self.feature_names)].to_numpy(dtype=np.float64)
        X = np.asarray(rows, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise LearnerError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        return X

    def margins(self, rows) -> np.ndarray:
        X = self._matrix(rows)
        out = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                out[:, k] += tree.predict(X)
        return out

    def predict_proba(self, rows) -> np.ndarray:
        return softmax(self.margins(rows))

    def predict(self, rows) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.predict_proba(rows), axis=1)

    def used_features(self) -> List[str]:
        used = sorted({int(f) for rt in self.trees for t in rt for f in t.feature if f >= 0})
        return [self.feature_names[i] for i in used]

    def to_dict(self) -> Dict:
        return {
            "format": "shiftforge-gbdt",
            "version": 1,
            "n_classes": self.n_classes,
            "feature_names": list(self.feature_names),
            "base_score": [float(v) for v in self.base_score],
            "hyperparams": self.hyperparams.model_dump(),
            "seed": self.seed,
            "loss_history": [float(v) for v in self.loss_history],
            "trees": [[t.to_dict() for t in rt] for rt in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoostedEnsemble":
        if d.get("format") != "shiftforge-gbdt":
            raise LearnerError(f"not a model dump: format={d.get('format')!r}")
        return cls(
            n_classes=int(d["n_classes"]),
            trees=tuple(tuple(RegressionTree.from_dict(t) for t in rt) for rt in d["trees"]),
            base_score=np.asarray(d["base_score"], dtype=np.float64),
            feature_names=tuple(d["feature_names"]),
            hyperparams=HyperParams(**d["hyperparams"]),
            seed=int(d.get("seed", 0)),
            loss_history=tuple(d.get("loss_history", ())),
        )


# ── fitting ───────────────────────────────────────────────────────────────────

def class_weights_balanced(labels: Sequence[int]) -> Dict[int, float]:
    """weight_c = n / (K * n_c) over the K classes present."""
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    n, k = y.size, classes.size
    return {int(c): n / (k * int(m)) for c, m in zip(classes, counts)}


def _features(X: ArrayLike, feature_names: Optional[Sequence[str]]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if isinstance(X, pd.DataFrame):
        names = tuple(feature_names or X.columns)
        X = X[list(names)].to_numpy(dtype=np.float64)
    else:
        X = np.asarray(X, dtype=np.float64)
        names = tuple(feature_names or (f"f{i}" for i in range(X.shape[1])))
    if X.ndim != 2 or X.shape[1] != len(names):
        raise LearnerError(f"feature matrix {X.shape} does not match {len(names)} names")
    bad = [names[j] for j in range(X.shape[1]) if not np.all(np.isfinite(X[:, j]))]
    if bad:
        raise LearnerError(f"non-finite values in features: {bad}")
    return X, names


def training_loss(model: BoostedEnsemble, X: ArrayLike, y: Sequence[int], weights=None) -> float:
    """Weighted mean multiclass cross-entropy."""
    p = np.clip(model.predict_proba(X), 1e-300, 1.0)
    y = np.asarray(y, dtype=np.int64)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(-np.sum(w * np.log(p[np.arange(y.size), y])) / np.sum(w))


def fit(X: ArrayLike, y: Sequence[int], hp: Optional[HyperParams] = None,
        class_weights: Optional[Mapping[int, float]] = None, seed: int = 0,
        feature_names: Optional[Sequence[str]] = None, sample_weight=None,
        n_classes: Optional[int] = None) -> BoostedEnsemble:
    hp = hp or HyperParams()
    X, names = _features(X, feature_names)
    y = np.asarray(y, dtype=np.int64)
    if y.size != X.shape[0]:
        raise LearnerError(f"{X.shape[0]} rows but {y.size} labels")
    present = np.unique(y)
    if present.size < 2:
        raise LearnerError(f"need at least 2 classes, got {present.tolist()}")
    K = int(n_classes or present.max() + 1)

    w = np.ones(y.size) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64).copy()
    if class_weights is not None:
        w = w * np.array([class_weights.get(int(c), 1.0) for c in y])

    # canonical row order: the model never depends on how rows arrived
    order = np.lexsort((w, y) + tuple(X[:, j] for j in reversed(range(X.shape[1]))))
    X, y, w = X[order], y[order], w[order]

    counts = np.bincount(y, minlength=K).astype(np.float64)
    prior = counts / counts.sum() if np.all(counts > 0) else (counts + 1.0) / (counts.sum() + K)
    base = np.log(prior)

    onehot = np.eye(K)[y]
    margins = np.tile(base, (y.size, 1))
    rounds: List[Tuple[RegressionTree, ...]] = []
    history: List[float] = []
    all_rows = np.arange(y.size)

    for r in range(hp.n_estimators):
        p = softmax(margins)
        history.append(float(-np.sum(w * np.log(np.clip(p[all_rows, y], 1e-300, 1.0))) / np.sum(w)))
        grad = (p - onehot) * w[:, None]
        hess = np.maximum(2.0 * p * (1.0 - p) * w[:, None], MIN_HESS)
        idx = all_rows
        if hp.subsample < 1.0:
            rng = np.random.default_rng(derive_seed(seed, "subsample", r))
            take = max(1, int(round(hp.subsample * y.size)))
            idx = np.sort(rng.choice(y.size, size=take, replace=False))
        trees = tuple(_TreeBuilder(X, grad[:, k], hess[:, k], hp).build(idx) for k in range(K))
        for k, t in enumerate(trees):
            margins[:, k] += t.predict(X)
        rounds.append(trees)

    p = softmax(margins)
    history.append(float(-np.sum(w * np.log(np.clip(p[all_rows, y], 1e-300, 1.0))) / np.sum(w)))
    return BoostedEnsemble(K, tuple(rounds), base, names, hp, int(seed), tuple(history))


# ── grid search ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GridSearchResult:
    best: HyperParams
    cv_scores: List[Dict]
    folds: int
    seed: int

    def to_dict(self) -> Dict:
        return {"best": self.best.model_dump(), "folds": self.folds, "seed": self.seed, "cv_scores": self.cv_scores}


def candidate_grid(grid: Union[ParamGrid, Mapping, None], min_child_weight: float = 1.0,
                   subsample: float = 1.0) -> List[HyperParams]:
    spec = (grid or ParamGrid())
    spec = spec.model_dump() if isinstance(spec, ParamGrid) else dict(spec)
    return [HyperParams(min_child_weight=min_child_weight, subsample=subsample, **params)
            for params in ParameterGrid(spec)]


def effective_folds(y: Sequence[int], folds: int) -> int:
    smallest = int(np.bincount(np.asarray(y, dtype=np.int64)).astype(np.int64)[np.unique(y)].min())
    if folds <= smallest:
        return folds
    if smallest < 2:
        raise LearnerError(f"a class has {smallest} training rows; cross-validation needs at least 2")
    msg = f"smallest class has {smallest} rows; reducing CV folds {folds} → {smallest}"
    log.warning("⚠️ %s", msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return smallest


def grid_search_cv(X: ArrayLike, y: Sequence[int], grid: Union[ParamGrid, Mapping, Sequence[HyperParams], None] = None,
                   folds: int = 5, seed: int = 0, feature_names: Optional[Sequence[str]] = None,
                   min_child_weight: float = 1.0, subsample: float = 1.0, balanced: bool = True,
                   n_classes: Optional[int] = None, workers: Optional[int] = None) -> GridSearchResult:
    X, names = _features(X, feature_names)
    y = np.asarray(y, dtype=np.int64)
    if isinstance(grid, (list, tuple)) and grid and isinstance(grid[0], HyperParams):
        candidates = list(grid)
    else:
        candidates = candidate_grid(grid, min_child_weight, subsample)
    if not candidates:
        raise LearnerError("empty hyper-parameter grid")
    k = effective_folds(y, folds)
    K = int(n_classes or y.max() + 1)
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=derive_seed("cv", seed) % (2 ** 32))
    splits = list(splitter.split(X, y))

    def score(hp: HyperParams) -> Dict:
        fold_scores = []
        for tr, va in splits:
            cw = class_weights_balanced(y[tr]) if balanced else None
            model = fit(X[tr], y[tr], hp, cw, seed=seed, feature_names=names, n_classes=K)
            fold_scores.append(f1_from_labels(y[va], model.predict(X[va])))
        return {"params": hp.model_dump(), "mean_f1": float(np.mean(fold_scores)),
                "std_f1": float(np.std(fold_scores)), "fold_f1": fold_scores}

    scores = run_bounded(score, candidates, workers)
    best_i = 0
    for i, s in enumerate(scores):
        if s["mean_f1"] > scores[best_i]["mean_f1"]:
            best_i = i
    log.info("🧪 grid search: %d candidates × %d folds, best mean F1 %.4f", len(candidates), k,
             scores[best_i]["mean_f1"])
    return GridSearchResult(candidates[best_i], scores, k, int(seed))
