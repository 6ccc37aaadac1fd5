# evalcal.py — F1 / accuracy / ECE, reliability tables, temperature and ensemble-temperature scaling

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models import CalibrationParams, DataError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
T_BOUNDS = (0.05, 20.0)
T_TOL = 1e-4
ETS_STEP = 0.05
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PredictionSet:
    labels: np.ndarray        # int, 0..K-1
    probs: np.ndarray         # n × K, rows sum to 1

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise DataError(f"prediction shapes disagree: labels {labels.shape}, probs {probs.shape}")
        if probs.shape[0] and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise DataError("labels outside 0..K-1")
        if probs.size and (np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6)):
            raise DataError("probability rows must be non-negative and sum to 1")

    @property
    def n(self) -> int:
        return int(self.probs.shape[0])

    @property
    def k(self) -> int:
        return int(self.probs.shape[1])

    def predicted(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)


def _nonempty(preds: PredictionSet) -> None:
    if preds.n == 0:
        raise DataError("empty prediction set")


# ── metrics ───────────────────────────────────────────────────────────────────

def f1_from_labels(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """Macro F1 over the classes present in y_true; per class 2TP / (2TP + FP + FN)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    scores = []
    for c in np.unique(y_true):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        scores.append(2.0 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def f1_macro(preds: PredictionSet) -> float:
    _nonempty(preds)
    return f1_from_labels(preds.labels, preds.predicted())


def accuracy(preds: PredictionSet) -> float:
    _nonempty(preds)
    return float(np.mean(preds.predicted() == preds.labels))


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin m (0-based) holds m/M < conf <= (m+1)/M; conf = 0 joins the first bin."""
    edges = np.arange(n_bins + 1) / n_bins
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)


def reliability_table(preds: PredictionSet, n_bins: int = 10) -> pd.DataFrame:
    if n_bins < 1:
        raise DataError(f"ECE needs at least one bin, got {n_bins}")
    conf = preds.confidence()
    correct = (preds.predicted() == preds.labels).astype(np.float64)
    idx = bin_index(conf, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    safe = np.maximum(count, 1)
    edges = np.arange(n_bins + 1) / n_bins
    return pd.DataFrame({
        "bin_low": edges[:-1],
        "bin_high": edges[1:],
        "count": count,
        "mean_conf": np.where(count > 0, conf_sum / safe, 0.0),
        "mean_acc": np.where(count > 0, acc_sum / safe, 0.0),
    })


def ece(preds: PredictionSet, n_bins: int = 10) -> float:
    _nonempty(preds)
    table = reliability_table(preds, n_bins)
    gaps = (table["count"] / preds.n) * (table["mean_acc"] - table["mean_conf"]).abs()
    return float(gaps.sum())


def nll(preds: PredictionSet) -> float:
    p = np.clip(preds.probs[np.arange(preds.n), preds.labels], PROB_FLOOR, 1.0)
    return float(-np.mean(np.log(p)))


# ── calibration ───────────────────────────────────────────────────────────────

def _logits(probs: np.ndarray) -> np.ndarray:
    return np.log(np.clip(probs, PROB_FLOOR, 1.0))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ts_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    return _softmax(_logits(probs) / temperature)


def _mix(components: Tuple[np.ndarray, np.ndarray, float], w) -> np.ndarray:
    scaled, ident, uniform = components
    return w[0] * scaled + w[1] * ident + w[2] * uniform


def _mean_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(probs[np.arange(labels.size), labels], PROB_FLOOR, 1.0))))


def _degenerate(preds: PredictionSet) -> bool:
    first = preds.probs[0]
    return bool(first.max() == 1.0 and np.all(preds.probs == first))


def fit_temperature(validation: PredictionSet) -> CalibrationParams:
    """Golden-section search for T minimising validation NLL of softmax(log p / T)."""
    _nonempty(validation)
    if _degenerate(validation):
        msg = "validation rows are identical one-hot vectors; temperature left at 1"
        log.warning("⚠️ %s", msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return CalibrationParams(method="TS", temperature=1.0)

    y = validation.labels

    def loss(t: float) -> float:
        return _mean_nll(_ts_probs(validation.probs, t), y)

    a, b = T_BOUNDS
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = loss(c), loss(d)
    while b - a > T_TOL:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = loss(d)
    t = (a + b) / 2.0
    if loss(1.0) <= loss(t):
        t = 1.0
    log.debug("fitted temperature %.4f", t)
    return CalibrationParams(method="TS", temperature=float(t))


def _simplex_grid(step: float):
    n = int(round(1.0 / step))
    for i in range(n + 1):
        for j in range(n + 1 - i):
            yield (i / n, j / n, (n - i - j) / n)


def fit_ets(validation: PredictionSet) -> CalibrationParams:
    """Temperature from fit_temperature, then mixture weights over (scaled, identity, uniform)."""
    ts = fit_temperature(validation)
    y = validation.labels
    components = (_ts_probs(validation.probs, ts.temperature), validation.probs, 1.0 / validation.k)

    def loss(w) -> float:
        return _mean_nll(_mix(components, w), y)

    best_w, best = None, math.inf
    for w in _simplex_grid(ETS_STEP):
        v = loss(w)
        if v < best:
            best_w, best = w, v

    # pattern search along simplex-preserving moves, strict improvements only
    moves = ((1, -1, 0), (-1, 1, 0), (1, 0, -1), (-1, 0, 1), (0, 1, -1), (0, -1, 1))
    step = ETS_STEP / 2.0
    while step >= 1e-4:
        improved = False
        for m in moves:
            cand = tuple(wi + step * mi for wi, mi in zip(best_w, m))
            if min(cand) < 0:
                continue
            v = loss(cand)
            if v < best:
                best_w, best, improved = cand, v, True
        if not improved:
            step /= 2.0

    w1, w2 = max(best_w[0], 0.0), max(best_w[1], 0.0)
    w3 = max(1.0 - w1 - w2, 0.0)
    total = w1 + w2 + w3
    return CalibrationParams(method="ETS", temperature=ts.temperature, weights=(w1 / total, w2 / total, w3 / total))


def apply_calibration(preds: PredictionSet, params: Optional[CalibrationParams]) -> PredictionSet:
    if params is None or params.method == "none":
        return preds
    scaled = _ts_probs(preds.probs, params.temperature)
    if params.method == "TS":
        return PredictionSet(preds.labels, scaled)
    mixed = _mix((scaled, preds.probs, 1.0 / preds.k), params.weights)
    return PredictionSet(preds.labels, mixed / mixed.sum(axis=1, keepdims=True))


def fit_calibration(method: str, validation: PredictionSet) -> CalibrationParams:
    if method == "none":
        return CalibrationParams()
    if method == "TS":
        return fit_temperature(validation)
    if method == "ETS":
        return fit_ets(validation)
    raise DataError(f"unknown calibration method {method!r}")
