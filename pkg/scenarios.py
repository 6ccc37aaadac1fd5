# scenarios.py — robust-feature screening, scenario assembly (inter-observer / cross-protocol / compound),
# augmentation, train → calibrate → test runs, degradation ratios and report writing

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from evalcal import PredictionSet, accuracy, apply_calibration, ece, f1_macro, fit_calibration, nll, reliability_table
from learner import BoostedEnsemble, class_weights_balanced, fit, grid_search_cv
from models import (
    BASELINE_SCANS, FRUIT_CLASSES, OBSERVERS, ROTATED_SCANS, SEQUENCES, DataError, LeakageError,
    RunConfig, ScenarioError, ScenarioSpec, ShiftForgeError,
)
from radiomics import FEATURE_NAMES, PROVENANCE_COLUMNS, read_feature_table
from utils import REPORT_DIR, dumps_stable, safe, write_json
from workers import run_bounded

log = logging.getLogger(__name__)

SCHEMA = 1
KEY_COLUMNS = ("sequence", "scan_id", "observer", "seg_type", "sample_id")
# robust-set sizes measured on the physical fruit phantom, printed next to what this run achieved
REFERENCE_COUNTS = {"T2-MAP": 84, "T2-FLAIR": 59, "T1-TSE": 33, "T2-TSE": 31, "T2-HASTE": 27, "consistent": 8}
SIMULATION_NOTE = ("synthetic phantom: geometry, contrast, noise and segmentation variation are simulated "
                   "stand-ins for MRI acquisitions; compare trends, not magnitudes")

Cell = Tuple[str, str, str, str]      # (sequence, scan_id, observer, seg_type)


# ── dataset ───────────────────────────────────────────────────────────────────

class Dataset:
    """Feature rows with provenance, keyed by (sequence, scan_id, observer, seg_type, sample_id)."""

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in list(PROVENANCE_COLUMNS) + list(FEATURE_NAMES) if c not in frame.columns]
        if missing:
            raise DataError(f"feature table lacks columns: {missing[:5]}")
        frame = frame.copy()
        frame["scan_id"] = frame["scan_id"].astype(str)
        frame["sample_id"] = frame["sample_id"].astype(int)
        dupes = frame.duplicated(list(KEY_COLUMNS))
        if dupes.any():
            raise DataError(f"{int(dupes.sum())} duplicate provenance rows")
        unknown = sorted(set(frame["class"]) - set(FRUIT_CLASSES))
        if unknown:
            raise DataError(f"unknown classes {unknown}")
        sizes = frame.groupby(["sequence", "scan_id", "observer", "seg_type"]).size()
        if sizes.nunique() > 1:
            raise DataError(f"cells differ in size: {sorted(set(sizes.tolist()))}")
        self.frame = frame.sort_values(list(KEY_COLUMNS), kind="mergesort").reset_index(drop=True)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        return cls(read_feature_table(path))

    def cells(self) -> set:
        return set(map(tuple, self.frame[["sequence", "scan_id", "observer", "seg_type"]].drop_duplicates().to_numpy()))

    def gather(self, cells: Iterable[Cell]) -> pd.DataFrame:
        cells = list(cells)
        have = self.cells()
        missing = [c for c in cells if tuple(c) not in have]
        if missing:
            raise DataError("missing cells: " + ", ".join("/".join(c) for c in missing))
        parts = []
        for seq, scan, obs, seg in cells:
            f = self.frame
            parts.append(f[(f["sequence"] == seq) & (f["scan_id"] == scan) & (f["observer"] == obs) & (f["seg_type"] == seg)])
        return pd.concat(parts, ignore_index=True)

    def cell(self, sequence: str, scan_id: str, observer: str, seg_type: str) -> pd.DataFrame:
        return self.gather([(sequence, scan_id, observer, seg_type)])


def labels_of(frame: pd.DataFrame) -> np.ndarray:
    index = {c: i for i, c in enumerate(FRUIT_CLASSES)}
    return frame["class"].map(index).to_numpy(dtype=np.int64)


def provenance_keys(frame: pd.DataFrame) -> set:
    return set(map(tuple, frame[list(KEY_COLUMNS)].astype(str).to_numpy()))


# ── robust features ───────────────────────────────────────────────────────────

def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    """Lin's concordance with population moments; nan when both series are constant and equal in mean."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    vx, vy = np.mean((x - mx) ** 2), np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    den = vx + vy + (mx - my) ** 2
    return float(2.0 * cov / den) if den > 0 else math.nan


def identify_robust_features(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], threshold: float = 0.9,
                             names: Sequence[str] = FEATURE_NAMES) -> List[str]:
    """Features whose CCC reaches threshold in every test-retest pairing (rows aligned by sample)."""
    if not pairs:
        raise DataError("no test-retest pairings")
    keep = []
    for j, name in enumerate(names):
        ok = True
        for a, b in pairs:
            xa, xb = np.asarray(a)[:, j], np.asarray(b)[:, j]
            c = ccc(xa, xb)
            if math.isnan(c):
                ok = bool(np.array_equal(xa, xb))
            else:
                ok = c >= threshold
            if not ok:
                break
        if ok:
            keep.append(name)
    return keep


def retest_pairs(data: Dataset, sequence: str, seg_type: str = "partial") -> List[Tuple[np.ndarray, np.ndarray]]:
    """Rescan pairings (scan 1 vs 2 per observer) and observer pairings (obs1 vs obs2 per scan)."""
    def block(scan, obs):
        return data.cell(sequence, scan, obs, seg_type).sort_values("sample_id")[list(FEATURE_NAMES)].to_numpy(np.float64)

    pairs = [(block("1", o), block("2", o)) for o in OBSERVERS]
    pairs += [(block(s, "obs1"), block(s, "obs2")) for s in BASELINE_SCANS]
    return pairs


def robust_feature_sets(data: Dataset, threshold: float = 0.9, seg_type: str = "partial",
                        sequences: Sequence[str] = SEQUENCES) -> Dict[str, List[str]]:
    sets = {seq: identify_robust_features(retest_pairs(data, seq, seg_type), threshold) for seq in sequences}
    for seq, names in sets.items():
        log.info("🧪 %s: %d robust features (reference %s)", seq, len(names), REFERENCE_COUNTS.get(seq))
    return sets


def intersect_in_order(sets: Iterable[Sequence[str]]) -> List[str]:
    common = None
    for s in sets:
        common = set(s) if common is None else common & set(s)
    return [n for n in FEATURE_NAMES if n in (common or set())]


@dataclass(frozen=True)
class FeatureSetSpec:
    kind: str
    names: Tuple[str, ...]
    sequences: Tuple[str, ...] = ()


def resolve_feature_set(kind: str, robust: Dict[str, List[str]], sequences: Sequence[str],
                        feature_sequence: Optional[str] = None) -> FeatureSetSpec:
    """consistent: robust in all five sequences. sequence_specific: robust in every one of `sequences`,
    or in `feature_sequence` alone when given (train on one protocol with another protocol's set)."""
    if kind == "all":
        return FeatureSetSpec("all", FEATURE_NAMES)
    if kind == "consistent":
        names = intersect_in_order(robust[s] for s in SEQUENCES)
        scope: Tuple[str, ...] = tuple(SEQUENCES)
    elif kind == "sequence_specific":
        scope = (feature_sequence,) if feature_sequence else tuple(sequences)
        names = intersect_in_order(robust[s] for s in scope)
    else:
        raise ScenarioError(f"unknown feature set kind {kind!r}")
    if not names:
        raise ScenarioError(f"{kind} feature set over {list(scope)} is empty")
    return FeatureSetSpec(kind, tuple(names), scope)


# ── assembly ──────────────────────────────────────────────────────────────────

TEST_MEASUREMENTS = (("1", "obs2"), ("2", "obs1"), ("2", "obs2"))


def assemble_inter_observer(data: Dataset, sequence: str) -> Tuple[pd.DataFrame, pd.DataFrame]:
    train = data.gather([(sequence, "1", "obs1", "partial")])
    test = data.gather([(sequence, s, o, "partial") for s, o in TEST_MEASUREMENTS])
    return train, test


def assemble_cross_protocol(data: Dataset, train_seqs: Sequence[str],
                            test_seqs: Sequence[str] = SEQUENCES) -> Tuple[pd.DataFrame, Dict[str, pd.DataFrame]]:
    if not train_seqs:
        raise ScenarioError("cross-protocol run needs at least one training sequence")
    train = data.gather([(s, "1", "obs1", "partial") for s in train_seqs])
    tests = {seq: data.gather([(seq, s, o, "partial") for s, o in TEST_MEASUREMENTS]) for seq in test_seqs}
    return train, tests


def assemble_compound(data: Dataset, train_seqs: Sequence[str], test_seqs: Sequence[str] = SEQUENCES):
    train = data.gather([(q, s, "obs1", "full_A") for q in train_seqs for s in BASELINE_SCANS])
    validation = data.gather([(q, s, "obs2", "full_B") for q in train_seqs for s in BASELINE_SCANS])
    tests = {}
    for seq in test_seqs:
        tests[(seq, "partial")] = data.gather([(seq, s, o, "partial") for s in BASELINE_SCANS for o in OBSERVERS])
        tests[(seq, "rotated_full")] = data.gather([(seq, s, "obs2", "rotated_full") for s in ROTATED_SCANS])
    return train, validation, tests


def check_leakage(train: pd.DataFrame, validation: Optional[pd.DataFrame], tests: Dict) -> None:
    groups = {"train": provenance_keys(train)}
    if validation is not None and len(validation):
        groups["validation"] = provenance_keys(validation)
    for name, frame in tests.items():
        groups[f"test:{name}"] = provenance_keys(frame)
    names = list(groups)
    for a, b in itertools.combinations(names, 2):
        overlap = groups[a] & groups[b]
        if overlap:
            sample = sorted(overlap)[0]
            raise LeakageError(f"{len(overlap)} rows shared by {a} and {b}, e.g. {'/'.join(sample)}")


def augment_training(train: pd.DataFrame, data: Dataset, train_seqs: Sequence[str],
                     validation: Optional[pd.DataFrame] = None, tests: Optional[Dict] = None) -> pd.DataFrame:
    """Adds the alternate full variant and rotated full rows of the training scans (reader obs1)."""
    extra = data.gather([(q, s, "obs1", "full_B") for q in train_seqs for s in BASELINE_SCANS]
                        + [(q, s, "obs1", "rotated_full") for q in train_seqs for s in ROTATED_SCANS])
    out = pd.concat([train, extra], ignore_index=True)
    check_leakage(out, validation, tests or {})
    return out


# ── running ───────────────────────────────────────────────────────────────────

@dataclass
class FittedModel:
    model: BoostedEnsemble
    best: Dict
    cv_best_f1: float
    folds: int


def fit_model(train: pd.DataFrame, names: Sequence[str], seed: int, config: RunConfig) -> FittedModel:
    X = train[list(names)].to_numpy(np.float64)
    y = labels_of(train)
    lc = config.learner
    search = grid_search_cv(X, y, lc.grid, folds=lc.folds, seed=seed, feature_names=names,
                            min_child_weight=lc.min_child_weight, subsample=lc.subsample,
                            n_classes=len(FRUIT_CLASSES))
    model = fit(X, y, search.best, class_weights_balanced(y), seed=seed, feature_names=names,
                n_classes=len(FRUIT_CLASSES))
    best_score = max(s["mean_f1"] for s in search.cv_scores)
    return FittedModel(model, search.best.model_dump(), best_score, search.folds)


def predictions(model: BoostedEnsemble, frame: pd.DataFrame) -> PredictionSet:
    return PredictionSet(labels_of(frame), model.predict_proba(frame))


def cell_metrics(preds: PredictionSet, n_bins: int) -> Dict:
    return {"f1": f1_macro(preds), "accuracy": accuracy(preds), "ece": ece(preds, n_bins), "nll": nll(preds)}


def ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def _score_cells(model, tests: Dict[str, pd.DataFrame], roles: Dict[str, Dict], calibration, n_bins: int):
    cells, preds_out = [], {}
    for name, frame in tests.items():
        raw = predictions(model, frame)
        cal = apply_calibration(raw, calibration)
        cells.append({"cell": name, **roles[name], "n_test": raw.n,
                      "uncalibrated": cell_metrics(raw, n_bins), "calibrated": cell_metrics(cal, n_bins)})
        preds_out[name] = cal
    return cells, preds_out


@dataclass
class ScenarioResult:
    report: Dict
    models: Dict[str, BoostedEnsemble] = field(default_factory=dict)
    reliability: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _calibration_method(spec: ScenarioSpec, config: RunConfig, has_validation: bool) -> Tuple[str, str, Optional[str]]:
    requested = spec.calibration or config.evaluation.calibration
    if has_validation or requested == "none":
        return requested, requested, None
    return requested, "none", f"{spec.family} defines no validation split; calibration is never fitted on test rows"


def _run_inter_observer(spec, data, robust, config, seed):
    n_bins = config.evaluation.ece_bins
    cells, models, preds = [], {}, {}
    for seq in spec.test_sequences:
        fs = resolve_feature_set(spec.feature_set, robust, [seq], spec.feature_sequence)
        train, test = assemble_inter_observer(data, seq)
        check_leakage(train, None, {seq: test})
        fm = fit_model(train, fs.names, seed, config)
        c, p = _score_cells(fm.model, {seq: test}, {seq: {"sequence": seq, "seg_type": "partial", "role": "in_domain"}},
                            None, n_bins)
        c[0].update({"best_hyperparams": fm.best, "cv_best_f1": fm.cv_best_f1, "cv_folds": fm.folds,
                     "n_train": len(train), "n_features": len(fs.names)})
        cells += c
        preds.update(p)
        models[seq] = fm.model
    return {"cells": cells, "calibration": {"method": "none"}}, models, preds


def _run_cross_protocol(spec, data, robust, config, seed, train_seqs=None, keep_models=True):
    n_bins = config.evaluation.ece_bins
    train_seqs = list(train_seqs or spec.train_sequences)
    fs = resolve_feature_set(spec.feature_set, robust, train_seqs, spec.feature_sequence)
    train, tests = assemble_cross_protocol(data, train_seqs, spec.test_sequences)
    check_leakage(train, None, tests)
    fm = fit_model(train, fs.names, seed, config)
    roles = {seq: {"sequence": seq, "seg_type": "partial", "role": "in_domain" if seq in train_seqs else "held_out"}
             for seq in tests}
    cells, preds = _score_cells(fm.model, tests, roles, None, n_bins)
    in_dom = [c["uncalibrated"]["f1"] for c in cells if c["role"] == "in_domain"]
    ref = float(np.mean(in_dom)) if in_dom else 0.0
    for c in cells:
        c["ratio_f1"] = ratio(c["uncalibrated"]["f1"], ref) if in_dom else None
    extra = {"best_hyperparams": fm.best, "cv_best_f1": fm.cv_best_f1, "cv_folds": fm.folds,
             "n_train": len(train), "calibration": {"method": "none"}, "feature_names": list(fs.names)}
    return {"cells": cells, **extra}, ({"model": fm.model} if keep_models else {}), preds


def _run_compound(spec, data, robust, config, seed, method):
    n_bins = config.evaluation.ece_bins
    train_seqs = list(spec.train_sequences)
    fs = resolve_feature_set(spec.feature_set, robust, train_seqs, spec.feature_sequence)
    train, validation, tests = assemble_compound(data, train_seqs, spec.test_sequences)
    check_leakage(train, validation, tests)
    if spec.augment:
        train = augment_training(train, data, train_seqs, validation, tests)
    fm = fit_model(train, fs.names, seed, config)

    val_raw = predictions(fm.model, validation)
    calibration = fit_calibration(method, val_raw)
    named = {f"{seq}/{seg}": frame for (seq, seg), frame in tests.items()}
    roles = {f"{seq}/{seg}": {"sequence": seq, "seg_type": seg,
                              "role": "in_domain" if seq in train_seqs else "held_out"} for seq, seg in tests}
    cells, preds = _score_cells(fm.model, named, roles, calibration, n_bins)
    val_metrics = cell_metrics(val_raw, n_bins)
    for c in cells:
        c["ratio_f1"] = ratio(c["uncalibrated"]["f1"], val_metrics["f1"])
    return {
        "cells": cells,
        "validation": {"n": val_raw.n, "uncalibrated": val_metrics,
                       "calibrated": cell_metrics(apply_calibration(val_raw, calibration), n_bins)},
        "calibration": calibration.model_dump(),
        "best_hyperparams": fm.best, "cv_best_f1": fm.cv_best_f1, "cv_folds": fm.folds,
        "n_train": len(train), "augmented": spec.augment,
    }, {"model": fm.model}, preds


def _run_protocol_diversity(spec, data, robust, config, seed):
    rows = []
    for k in range(1, spec.max_train_sequences + 1):
        subsets = list(itertools.combinations(SEQUENCES, k))
        results = run_bounded(
            lambda sub: _run_cross_protocol(spec, data, robust, config, seed, train_seqs=sub, keep_models=False)[0],
            subsets)
        ratios, heldout = [], []
        for sub, res in zip(subsets, results):
            held = [c for c in res["cells"] if c["role"] == "held_out"]
            heldout += [c["uncalibrated"]["f1"] for c in held]
            ratios += [c["ratio_f1"] for c in held if c["ratio_f1"] is not None]
        mean_ratio = float(np.mean(ratios)) if ratios else None
        rows.append({"k": k, "subsets": len(subsets),
                     "mean_heldout_f1": float(np.mean(heldout)) if heldout else None,
                     "mean_ratio_f1": mean_ratio,
                     "mean_degradation": None if mean_ratio is None else 1.0 - mean_ratio})
        log.info("🧪 diversity k=%d: %d subsets, mean held-out degradation %s", k, len(subsets),
                 rows[-1]["mean_degradation"])
    return {"diversity": rows, "calibration": {"method": "none"}}, {}, {}


def _mean_metrics(dicts: List[Dict]) -> Dict:
    return {k: float(np.mean([d[k] for d in dicts])) for k in dicts[0]}


def _aggregate_cells(runs: List[Dict]) -> List[Dict]:
    if not runs or "cells" not in runs[0]:
        return []
    out = []
    for i, first in enumerate(runs[0]["cells"]):
        same = [r["cells"][i] for r in runs]
        ratios = [c.get("ratio_f1") for c in same]
        cell = {k: first[k] for k in ("cell", "sequence", "seg_type", "role", "n_test")}
        cell["uncalibrated"] = _mean_metrics([c["uncalibrated"] for c in same])
        cell["calibrated"] = _mean_metrics([c["calibrated"] for c in same])
        if "ratio_f1" in first:
            cell["ratio_f1"] = None if any(r is None for r in ratios) else float(np.mean(ratios))
        out.append(cell)
    return out


def _summary(family: str, cells: List[Dict], runs: List[Dict]) -> Dict:
    def mean_of(sel, key, which="uncalibrated"):
        vals = [c[which][key] for c in cells if sel(c)]
        return float(np.mean(vals)) if vals else None

    if family == "inter_observer":
        return {"mean_f1": mean_of(lambda c: True, "f1"),
                "min_f1": min((c["uncalibrated"]["f1"] for c in cells), default=None)}
    if family == "cross_protocol":
        held = [c["ratio_f1"] for c in cells if c["role"] == "held_out" and c.get("ratio_f1") is not None]
        return {"mean_in_domain_f1": mean_of(lambda c: c["role"] == "in_domain", "f1"),
                "mean_heldout_f1": mean_of(lambda c: c["role"] == "held_out", "f1"),
                "mean_heldout_ratio_f1": float(np.mean(held)) if held else None}
    if family == "compound":
        out = {}
        for seg in ("partial", "rotated_full"):
            sel = lambda c, seg=seg: c["seg_type"] == seg
            out[seg] = {"f1": mean_of(sel, "f1"), "ece": mean_of(sel, "ece"),
                        "f1_calibrated": mean_of(sel, "f1", "calibrated"),
                        "ece_calibrated": mean_of(sel, "ece", "calibrated")}
        return out
    if family == "protocol_diversity":
        per_k: Dict[int, List] = {}
        for r in runs:
            for row in r["diversity"]:
                per_k.setdefault(row["k"], []).append(row["mean_degradation"])
        return {"mean_degradation_by_k": {str(k): (None if any(v is None for v in vals) else float(np.mean(vals)))
                                          for k, vals in sorted(per_k.items())}}
    return {}


def assumptions(config: RunConfig) -> Dict:
    return {
        "binning": config.extraction.binning,
        "bins": config.extraction.bins,
        "bin_width": config.extraction.bin_width,
        "texture_distance": 1,
        "ece_bins": config.evaluation.ece_bins,
        "p_obs": config.segmentation.p_obs,
        "percentile_a": config.segmentation.percentile_a,
        "percentile_b": config.segmentation.percentile_b,
        "observer_jitter": config.segmentation.observer_jitter,
        "partial_fraction": config.segmentation.fraction,
        "ccc_threshold": config.robustness.ccc_threshold,
        "robustness_seg_type": config.robustness.seg_type,
        "grid": config.learner.grid.model_dump(),
        "folds": config.learner.folds,
        "f1": "macro over classes present in truth",
        "degradation_metric": "f1",
    }


def run_scenario(spec: ScenarioSpec, data: Dataset, config: Optional[RunConfig] = None,
                 robust: Optional[Dict[str, List[str]]] = None) -> ScenarioResult:
    config = config or RunConfig()
    if robust is None:
        robust = robust_feature_sets(data, config.robustness.ccc_threshold, config.robustness.seg_type)
    has_validation = spec.family == "compound"
    requested, applied, reason = _calibration_method(spec, config, has_validation)
    degenerate = spec.family == "cross_protocol" and not (set(spec.test_sequences) - set(spec.train_sequences))
    if degenerate:
        log.warning("⚠️ %s: every test sequence is also a training sequence, no held-out cells", spec.name)

    log.info("🧪 scenario %s (%s, features=%s, seeds=%s)", spec.name, spec.family, spec.feature_set, spec.seeds)
    runs, models, pooled = [], {}, {}
    for seed in spec.seeds:
        if spec.family == "inter_observer":
            run, m, p = _run_inter_observer(spec, data, robust, config, seed)
        elif spec.family == "cross_protocol":
            run, m, p = _run_cross_protocol(spec, data, robust, config, seed)
        elif spec.family == "compound":
            run, m, p = _run_compound(spec, data, robust, config, seed, applied)
        else:
            run, m, p = _run_protocol_diversity(spec, data, robust, config, seed)
        runs.append({"seed": seed, **run})
        for name, model in m.items():
            models[f"{name}.seed{seed}"] = model
        for name, preds in p.items():
            pooled.setdefault(name, []).append(preds)

    # sequence-specific sets vary per cell or subset in these families; cells carry their own size
    per_cell = (spec.feature_set == "sequence_specific" and spec.feature_sequence is None
                and spec.family in ("inter_observer", "protocol_diversity"))
    fs_names = () if per_cell else resolve_feature_set(spec.feature_set, robust, spec.train_sequences,
                                                       spec.feature_sequence).names

    cells = _aggregate_cells(runs)
    report = {
        "schema": SCHEMA,
        "scenario": spec.model_dump(mode="json"),
        "simulation": True,
        "simulation_note": SIMULATION_NOTE,
        "assumptions": assumptions(config),
        "reference_counts": REFERENCE_COUNTS,
        "achieved_counts": {**{s: len(robust[s]) for s in SEQUENCES},
                            "consistent": len(intersect_in_order(robust[s] for s in SEQUENCES))},
        "feature_set": {"kind": spec.feature_set, "sequence": spec.feature_sequence, "n": len(fs_names),
                        "names": list(fs_names)},
        "calibration": {"requested": requested, "applied": applied, "forced_reason": reason},
        "degenerate": degenerate,
        "runs": runs,
        "cells": cells,
        "summary": _summary(spec.family, cells, runs),
        "config": config.model_dump(mode="json"),
    }
    reliability = {}
    for name, sets in pooled.items():
        merged = PredictionSet(np.concatenate([s.labels for s in sets]), np.vstack([s.probs for s in sets]))
        reliability[name] = reliability_table(merged, config.evaluation.ece_bins)
    log.info("✅ scenario %s done", spec.name)
    return ScenarioResult(report, models, reliability)


# ── outputs ───────────────────────────────────────────────────────────────────

SUMMARY_COLUMNS = ["scenario", "family", "feature_set", "augment", "cell", "sequence", "seg_type", "role",
                   "n_test", "f1", "accuracy", "ece", "ece_calibrated", "ratio_f1"]


def summary_rows(report: Dict) -> List[Dict]:
    sc = report["scenario"]
    rows = []
    for c in report.get("cells", []):
        rows.append({
            "scenario": sc["name"], "family": sc["family"], "feature_set": sc["feature_set"],
            "augment": sc["augment"], "cell": c["cell"], "sequence": c["sequence"], "seg_type": c["seg_type"],
            "role": c["role"], "n_test": c["n_test"], "f1": c["uncalibrated"]["f1"],
            "accuracy": c["uncalibrated"]["accuracy"], "ece": c["uncalibrated"]["ece"],
            "ece_calibrated": c["calibrated"]["ece"], "ratio_f1": c.get("ratio_f1"),
        })
    return rows


def write_summary(reports: Sequence[Dict], path) -> Path:
    rows = [r for rep in reports for r in summary_rows(rep)]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=SUMMARY_COLUMNS).to_csv(out, index=False, float_format="%.17g")
    return out


def write_scenario_outputs(result: ScenarioResult, run_dir) -> Path:
    name = safe(result.report["scenario"]["name"])
    base = Path(run_dir) / REPORT_DIR
    report_path = write_json(base / f"{name}.json", result.report)
    for model_name, model in sorted(result.models.items()):
        write_json(base / "models" / f"{name}.{safe(model_name)}.model.json", model.to_dict())
    for cell, table in sorted(result.reliability.items()):
        out = base / "reliability" / name / f"{safe(cell.replace('/', '_'))}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False, float_format="%.17g")
    log.info("📤 report → %s", report_path)
    return report_path


def run_all(config: RunConfig, data: Dataset, run_dir) -> Tuple[List[Dict], List[Tuple[str, str]]]:
    """Runs every configured scenario; returns (reports, failures as (name, message))."""
    robust = robust_feature_sets(data, config.robustness.ccc_threshold, config.robustness.seg_type)
    write_json(Path(run_dir) / REPORT_DIR / "robust_features.json",
               {"threshold": config.robustness.ccc_threshold, "seg_type": config.robustness.seg_type,
                "sets": robust, "consistent": intersect_in_order(robust[s] for s in SEQUENCES),
                "reference_counts": REFERENCE_COUNTS})
    reports, failures = [], []
    for spec in config.scenarios:
        try:
            result = run_scenario(spec, data, config, robust)
            write_scenario_outputs(result, run_dir)
        except ShiftForgeError as e:
            log.error("❌ scenario %s failed: %s", spec.name, e)
            failures.append((spec.name, str(e)))
            continue
        except Exception as e:
            # remaining scenarios still run
            log.exception("❌ scenario %s crashed", spec.name)
            failures.append((spec.name, f"{type(e).__name__}: {e}"))
            continue
        reports.append(result.report)
    write_summary(reports, Path(run_dir) / REPORT_DIR / "summary.csv")
    return reports, failures


def report_bytes(report: Dict) -> bytes:
    return dumps_stable(report).encode("utf-8")
