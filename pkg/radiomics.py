# radiomics.py — 107 standardized ROI features: shape, first-order, GLCM, GLRLM, GLSZM, GLDM, NGTDM
#
# Texture matrices are built from whole-array shifts of a level image (0 outside the ROI),
# so every count is an exact integer and matrix content does not depend on traversal order.
# Per-direction features are averaged with math.fsum; the result is bit-stable under any
# permutation of voxels or directions, which is what makes 90° rotations reproduce exactly.

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from models import DataError, ExtractionConfig
from phantomgen import VoxelVolume
from segmentation import Segmentation, inner_shell

log = logging.getLogger(__name__)

COARSENESS_CAP = 1e6
MANIFEST_PATH = Path(__file__).with_name("feature_manifest.json")
PROVENANCE_COLUMNS = ("sample_id", "class", "sequence", "scan_id", "observer", "seg_type")

# 13 unique 3D offsets at distance 1: the 26-neighbourhood modulo sign
DIRECTIONS: Tuple[Tuple[int, int, int], ...] = tuple(
    d for d in itertools.product((-1, 0, 1), repeat=3) if d > (0, 0, 0)
)
NEIGHBOURS26: Tuple[Tuple[int, int, int], ...] = tuple(
    d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)
)
STRUCT26 = np.ones((3, 3, 3), dtype=bool)

_CLASS_FEATURES = {
    "shape": [
        "Elongation", "Flatness", "LeastAxisLength", "MajorAxisLength", "Maximum2DDiameterColumn",
        "Maximum2DDiameterRow", "Maximum2DDiameterSlice", "Maximum3DDiameter", "MeshVolume",
        "MinorAxisLength", "Sphericity", "SurfaceArea", "SurfaceVolumeRatio", "VoxelVolume",
    ],
    "firstorder": [
        "10Percentile", "90Percentile", "Energy", "Entropy", "InterquartileRange", "Kurtosis", "Maximum",
        "MeanAbsoluteDeviation", "Mean", "Median", "Minimum", "Range", "RobustMeanAbsoluteDeviation",
        "RootMeanSquared", "Skewness", "TotalEnergy", "Uniformity", "Variance",
    ],
    "glcm": [
        "Autocorrelation", "ClusterProminence", "ClusterShade", "ClusterTendency", "Contrast", "Correlation",
        "DifferenceAverage", "DifferenceEntropy", "DifferenceVariance", "Id", "Idm", "Idmn", "Idn", "Imc1",
        "Imc2", "InverseVariance", "JointAverage", "JointEnergy", "JointEntropy", "MaximumProbability",
        "SumAverage", "SumEntropy", "SumSquares", "SumVariance",
    ],
    "glrlm": [
        "GrayLevelNonUniformity", "GrayLevelNonUniformityNormalized", "GrayLevelVariance",
        "HighGrayLevelRunEmphasis", "LongRunEmphasis", "LongRunHighGrayLevelEmphasis",
        "LongRunLowGrayLevelEmphasis", "LowGrayLevelRunEmphasis", "RunEntropy", "RunLengthNonUniformity",
        "RunLengthNonUniformityNormalized", "RunPercentage", "RunVariance", "ShortRunEmphasis",
        "ShortRunHighGrayLevelEmphasis", "ShortRunLowGrayLevelEmphasis",
    ],
    "glszm": [
        "GrayLevelNonUniformity", "GrayLevelNonUniformityNormalized", "GrayLevelVariance",
        "HighGrayLevelZoneEmphasis", "LargeAreaEmphasis", "LargeAreaHighGrayLevelEmphasis",
        "LargeAreaLowGrayLevelEmphasis", "LowGrayLevelZoneEmphasis", "SizeZoneNonUniformity",
        "SizeZoneNonUniformityNormalized", "SmallAreaEmphasis", "SmallAreaHighGrayLevelEmphasis",
        "SmallAreaLowGrayLevelEmphasis", "ZoneEntropy", "ZonePercentage", "ZoneVariance",
    ],
    "gldm": [
        "DependenceEntropy", "DependenceNonUniformity", "DependenceNonUniformityNormalized",
        "DependenceVariance", "GrayLevelNonUniformity", "GrayLevelVariance", "HighGrayLevelEmphasis",
        "LargeDependenceEmphasis", "LargeDependenceHighGrayLevelEmphasis", "LargeDependenceLowGrayLevelEmphasis",
        "LowGrayLevelEmphasis", "SmallDependenceEmphasis", "SmallDependenceHighGrayLevelEmphasis",
        "SmallDependenceLowGrayLevelEmphasis",
    ],
    "ngtdm": ["Busyness", "Coarseness", "Complexity", "Contrast", "Strength"],
}
FEATURE_CLASSES = tuple(_CLASS_FEATURES)
CLASS_NAMES: Dict[str, List[str]] = {c: sorted(names) for c, names in _CLASS_FEATURES.items()}
FEATURE_NAMES: Tuple[str, ...] = tuple(f"{c}_{n}" for c in FEATURE_CLASSES for n in CLASS_NAMES[c])
TEXTURE_KINDS = ("GLCM", "GLRLM", "GLSZM", "GLDM", "NGTDM")


def load_manifest() -> List[str]:
    return json.loads(MANIFEST_PATH.read_text(encoding="utf-8"))["features"]


# ── types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DiscretizedROI:
    levels: np.ndarray          # int32 gray levels 1..Ng inside the ROI, 0 outside; cropped to the ROI box
    n_levels: int
    spacing: Tuple[float, float, float]
    bin_edges: np.ndarray

    @property
    def roi(self) -> np.ndarray:
        return self.levels > 0

    @property
    def n_voxels(self) -> int:
        return int(np.count_nonzero(self.levels))

    def voxels(self) -> List[Tuple[Tuple[int, int, int], int]]:
        idx = np.argwhere(self.levels > 0)
        return [(tuple(int(v) for v in p), int(self.levels[tuple(p)])) for p in idx]


@dataclass(frozen=True)
class TextureMatrix:
    kind: str
    table: object               # per-direction arrays for GLCM/GLRLM, one array otherwise
    n_levels: int
    n_voxels: int


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (len(FEATURE_NAMES),):
            raise DataError(f"feature vector must hold {len(FEATURE_NAMES)} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, v in zip(FEATURE_NAMES, self.values) if not math.isfinite(v)]
            raise DataError(f"non-finite features: {bad}")

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, (float(v) for v in self.values)))

    def as_row(self) -> Dict:
        row = {c: self.provenance.get(c) for c in PROVENANCE_COLUMNS}
        row.update(self.as_dict())
        return row


# ── helpers ───────────────────────────────────────────────────────────────────

def _shifted(a: np.ndarray, off: Sequence[int]) -> np.ndarray:
    """out[p] = a[p + off]; zero where p + off falls outside the array."""
    out = np.zeros_like(a)
    src, dst = [], []
    for o, n in zip(off, a.shape):
        if abs(o) >= n:
            return out
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = a[tuple(src)]
    return out


def _entropy(p: np.ndarray) -> float:
    q = p[p > 0]
    return float(-np.sum(q * np.log2(q))) if q.size else 0.0


def _mean_over(values: List[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def _roi_box(region: np.ndarray):
    sl = ndimage.find_objects(region.astype(np.int8))
    if not sl or sl[0] is None:
        raise DataError("empty ROI")
    return sl[0]


# ── discretization ────────────────────────────────────────────────────────────

def discretize_values(x: np.ndarray, binning: str = "count", bins: int = 32, bin_width: float = 25.0):
    """Gray levels for a flat intensity array; returns (levels, n_levels, bin_edges)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("empty ROI")
    lo, hi = float(x.min()), float(x.max())
    if binning == "count":
        if bins < 1:
            raise DataError(f"bin count must be >= 1, got {bins}")
        if hi == lo:
            return np.ones(x.shape, dtype=np.int32), 1, np.array([lo, hi])
        lv = np.floor(bins * (x - lo) / (hi - lo)).astype(np.int64) + 1
        lv = np.clip(lv, 1, bins).astype(np.int32)
        return lv, int(lv.max()), np.linspace(lo, hi, bins + 1)
    if binning == "width":
        if bin_width <= 0:
            raise DataError(f"bin width must be > 0, got {bin_width}")
        lv = (np.floor((x - lo) / bin_width).astype(np.int64) + 1).astype(np.int32)
        ng = int(lv.max())
        return lv, ng, lo + bin_width * np.arange(ng + 1)
    raise DataError(f"unknown binning {binning!r}")


def discretize(volume: VoxelVolume, segmentation: Segmentation, label: int,
               binning: str = "count", bins: int = 32, bin_width: float = 25.0) -> DiscretizedROI:
    region = segmentation.labels == label
    if not region.any():
        raise DataError(f"label {label} is empty")
    box = _roi_box(region)
    sub = region[box]
    lv, ng, edges = discretize_values(volume.data[box][sub], binning, bins, bin_width)
    levels = np.zeros(sub.shape, dtype=np.int32)
    levels[sub] = lv
    return DiscretizedROI(levels, ng, tuple(volume.spacing), edges)


# ── first order ───────────────────────────────────────────────────────────────

def first_order(intensities: np.ndarray, levels: np.ndarray, voxel_volume: float = 1.0) -> Dict[str, float]:
    # sorted input makes every reduction independent of voxel order
    x = np.sort(np.asarray(intensities, dtype=np.float64).ravel())
    if x.size == 0:
        raise DataError("empty ROI")
    n = x.size
    mean = float(np.mean(x))
    dev = x - mean
    var = float(np.mean(dev ** 2))
    p10, p25, p75, p90 = (float(v) for v in np.percentile(x, [10, 25, 75, 90]))
    robust = x[(x >= p10) & (x <= p90)]
    energy = float(np.sum(x ** 2))
    hist = np.bincount(np.asarray(levels, dtype=np.int64).ravel())[1:] / n
    if var > 0:
        skew = float(np.mean(dev ** 3)) / var ** 1.5
        kurt = float(np.mean(dev ** 4)) / var ** 2
    else:
        skew = kurt = 0.0
    return {
        "10Percentile": p10,
        "90Percentile": p90,
        "Energy": energy,
        "Entropy": _entropy(hist),
        "InterquartileRange": p75 - p25,
        "Kurtosis": kurt,
        "Maximum": float(x[-1]),
        "MeanAbsoluteDeviation": float(np.mean(np.abs(dev))),
        "Mean": mean,
        "Median": float(np.median(x)),
        "Minimum": float(x[0]),
        "Range": float(x[-1] - x[0]),
        "RobustMeanAbsoluteDeviation": float(np.mean(np.abs(robust - robust.mean()))) if robust.size else 0.0,
        "RootMeanSquared": math.sqrt(energy / n),
        "Skewness": skew,
        "TotalEnergy": voxel_volume * energy,
        "Uniformity": float(np.sum(hist ** 2)),
        "Variance": var,
    }


# ── shape ─────────────────────────────────────────────────────────────────────

def _max_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    if len(points) > 16:
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            pass  # degenerate (flat or collinear) cloud: brute force below
    return float(pdist(points).max())


def _planar_diameter(points: np.ndarray, axis: int) -> float:
    """Largest in-plane distance among points sharing a coordinate along `axis`."""
    keep = [a for a in range(3) if a != axis]
    best = 0.0
    for v in np.unique(points[:, axis]):
        best = max(best, _max_distance(points[points[:, axis] == v][:, keep]))
    return best


def shape_features(segmentation, label: int, spacing) -> Dict[str, float]:
    """Shape group on the voxel-face surface.

    Maximum2DDiameterColumn/Row fold the coronal and sagittal plane diameters into
    their max and min, which only makes them invariant to 90° turns about z. A turn
    about x or y moves the axial plane into a vertical one and changes the
    Slice/Column/Row values. With isotropic spacing the other shape features
    survive any 90° turn.
    """
    labels = segmentation.labels if isinstance(segmentation, Segmentation) else np.asarray(segmentation)
    region = labels == label
    if not region.any():
        raise DataError(f"label {label} is empty")
    region = region[_roi_box(region)]
    sp = np.asarray(spacing, dtype=np.float64)

    n = int(region.sum())
    volume = n * float(np.prod(sp))
    padded = np.pad(region, 1).astype(np.int8)
    face = (sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1])
    area = sum(int(np.count_nonzero(np.diff(padded, axis=ax))) * face[ax] for ax in range(3))

    coords = np.argwhere(region) * sp
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / n
    lam = np.clip(np.sort(np.linalg.eigvalsh(cov))[::-1], 0.0, None)
    lam[lam < 1e-12 * lam[0]] = 0.0      # flat or collinear regions: solver noise, not extent
    major, minor, least = (4.0 * math.sqrt(v) for v in lam)
    elong = math.sqrt(lam[1] / lam[0]) if lam[0] > 0 else 0.0
    flat = math.sqrt(lam[2] / lam[0]) if lam[0] > 0 else 0.0

    surface = np.argwhere(inner_shell(region)) * sp
    coronal, sagittal = _planar_diameter(surface, 1), _planar_diameter(surface, 0)
    return {
        "Elongation": elong,
        "Flatness": flat,
        "LeastAxisLength": least,
        "MajorAxisLength": major,
        # in-plane pair folded with max/min so values survive a 90° turn about z
        "Maximum2DDiameterColumn": max(coronal, sagittal),
        "Maximum2DDiameterRow": min(coronal, sagittal),
        "Maximum2DDiameterSlice": _planar_diameter(surface, 2),
        "Maximum3DDiameter": _max_distance(surface),
        "MeshVolume": volume,
        "MinorAxisLength": minor,
        "Sphericity": (math.pi ** (1.0 / 3.0)) * (6.0 * volume) ** (2.0 / 3.0) / area,
        "SurfaceArea": area,
        "SurfaceVolumeRatio": area / volume,
        "VoxelVolume": volume,
    }


# ── texture matrices ──────────────────────────────────────────────────────────

def _glcm(roi: DiscretizedROI) -> List[np.ndarray]:
    lv, ng = roi.levels, roi.n_levels
    mats = []
    for d in DIRECTIONS:
        nb = _shifted(lv, d)
        ok = (lv > 0) & (nb > 0)
        counts = np.bincount((lv[ok] - 1) * ng + (nb[ok] - 1), minlength=ng * ng).reshape(ng, ng)
        mats.append(counts + counts.T)
    return mats


def _glrlm(roi: DiscretizedROI) -> List[np.ndarray]:
    lv, ng = roi.levels, roi.n_levels
    max_run = max(lv.shape)
    mats = []
    for d in DIRECTIONS:
        back = tuple(-c for c in d)
        start = (lv > 0) & (_shifted(lv, back) != lv)
        length = start.astype(np.int64)
        alive = start.copy()
        k = 1
        while alive.any():
            same = alive & (_shifted(lv, tuple(k * c for c in d)) == lv)
            length += same
            alive = same
            k += 1
        P = np.zeros((ng, max_run), dtype=np.int64)
        np.add.at(P, (lv[start] - 1, length[start] - 1), 1)
        mats.append(P)
    return mats


def _glszm(roi: DiscretizedROI) -> np.ndarray:
    lv, ng = roi.levels, roi.n_levels
    P = np.zeros((ng, roi.n_voxels), dtype=np.int64)
    for i in range(1, ng + 1):
        zones, nz = ndimage.label(lv == i, structure=STRUCT26)
        if nz:
            sizes = np.bincount(zones.ravel())[1:]
            np.add.at(P, (i - 1, sizes - 1), 1)
    return P


def _gldm(roi: DiscretizedROI) -> np.ndarray:
    lv, ng = roi.levels, roi.n_levels
    dep = np.zeros(lv.shape, dtype=np.int64)
    for d in NEIGHBOURS26:
        dep += (_shifted(lv, d) == lv)
    inside = lv > 0
    P = np.zeros((ng, len(NEIGHBOURS26) + 1), dtype=np.int64)
    np.add.at(P, (lv[inside] - 1, dep[inside]), 1)
    return P


def _ngtdm(roi: DiscretizedROI) -> np.ndarray:
    """Rows per level: n_i (voxels with a neighbour), p_i, s_i."""
    lv, ng = roi.levels, roi.n_levels
    total = np.zeros(lv.shape, dtype=np.int64)
    count = np.zeros(lv.shape, dtype=np.int64)
    for d in NEIGHBOURS26:
        nb = _shifted(lv, d)
        total += nb
        count += nb > 0
    valid = (lv > 0) & (count > 0)
    diff = np.abs(lv[valid] - total[valid] / count[valid])
    levels = lv[valid]
    n = np.bincount(levels, minlength=ng + 1)[1:].astype(np.float64)
    s = np.array([math.fsum(diff[levels == i]) for i in range(1, ng + 1)])
    nvp = n.sum()
    p = n / nvp if nvp > 0 else np.zeros(ng)
    return np.column_stack([n, p, s])


_BUILDERS = {"GLCM": _glcm, "GLRLM": _glrlm, "GLSZM": _glszm, "GLDM": _gldm, "NGTDM": _ngtdm}


def build_matrix(kind: str, roi: DiscretizedROI) -> TextureMatrix:
    if kind not in _BUILDERS:
        raise DataError(f"unknown matrix kind {kind!r}")
    return TextureMatrix(kind, _BUILDERS[kind](roi), roi.n_levels, roi.n_voxels)


# ── texture features ──────────────────────────────────────────────────────────

def _glcm_single(P: np.ndarray, ng: int) -> Dict[str, float]:
    p = P / P.sum()
    idx = np.arange(1, ng + 1, dtype=np.float64)
    I, J = np.meshgrid(idx, idx, indexing="ij")
    px, py = p.sum(axis=1), p.sum(axis=0)
    ux, uy = float(idx @ px), float(idx @ py)
    vx, vy = float(((idx - ux) ** 2) @ px), float(((idx - uy) ** 2) @ py)
    add_k = np.bincount((I + J).astype(np.int64).ravel(), weights=p.ravel(), minlength=2 * ng + 1)
    sub_k = np.bincount(np.abs(I - J).astype(np.int64).ravel(), weights=p.ravel(), minlength=ng)
    kk_add = np.arange(add_k.size, dtype=np.float64)
    kk_sub = np.arange(sub_k.size, dtype=np.float64)

    s = I + J - ux - uy
    diff2 = (I - J) ** 2
    absdiff = np.abs(I - J)
    hx, hy, hxy = _entropy(px), _entropy(py), _entropy(p.ravel())
    pxy = np.outer(px, py)
    nz = p > 0
    hxy1 = float(-np.sum(p[nz] * np.log2(pxy[nz])))
    hxy2 = _entropy(pxy.ravel())
    diff_avg = float(kk_sub @ sub_k)
    sum_avg = float(kk_add @ add_k)
    hmax = max(hx, hy)
    corr = (float(np.sum(p * I * J)) - ux * uy) / math.sqrt(vx * vy) if vx * vy > 0 else 1.0
    inv_var = float(np.sum(sub_k[1:] / kk_sub[1:] ** 2)) if ng > 1 else 0.0
    return {
        "Autocorrelation": float(np.sum(p * I * J)),
        "ClusterProminence": float(np.sum(s ** 4 * p)),
        "ClusterShade": float(np.sum(s ** 3 * p)),
        "ClusterTendency": float(np.sum(s ** 2 * p)),
        "Contrast": float(np.sum(diff2 * p)),
        "Correlation": corr,
        "DifferenceAverage": diff_avg,
        "DifferenceEntropy": _entropy(sub_k),
        "DifferenceVariance": float(((kk_sub - diff_avg) ** 2) @ sub_k),
        "Id": float(np.sum(p / (1.0 + absdiff))),
        "Idm": float(np.sum(p / (1.0 + diff2))),
        "Idmn": float(np.sum(p / (1.0 + diff2 / ng ** 2))),
        "Idn": float(np.sum(p / (1.0 + absdiff / ng))),
        "Imc1": (hxy - hxy1) / hmax if hmax > 0 else 0.0,
        "Imc2": math.sqrt(1.0 - math.exp(-2.0 * (hxy2 - hxy))) if hxy2 > hxy else 0.0,
        "InverseVariance": inv_var,
        "JointAverage": ux,
        "JointEnergy": float(np.sum(p ** 2)),
        "JointEntropy": hxy,
        "MaximumProbability": float(p.max()),
        "SumAverage": sum_avg,
        "SumEntropy": _entropy(add_k),
        "SumSquares": vx,
        "SumVariance": float(((kk_add - sum_avg) ** 2) @ add_k),
    }


def _emphasis_family(P: np.ndarray, n_voxels: int, size_offset: int = 1) -> Dict[str, float]:
    """Shared formulas for run/zone/dependence matrices: rows are gray levels, columns sizes."""
    total = float(P.sum())
    p = P / total
    i = np.arange(1, P.shape[0] + 1, dtype=np.float64)[:, None]
    j = np.arange(size_offset, P.shape[1] + size_offset, dtype=np.float64)[None, :]
    pi, pj = p.sum(axis=1), p.sum(axis=0)
    mu_i = float(np.sum(p * i))
    mu_j = float(np.sum(p * j))
    gln = float(np.sum(P.sum(axis=1).astype(np.float64) ** 2))
    sn = float(np.sum(P.sum(axis=0).astype(np.float64) ** 2))
    return {
        "small": float(np.sum(p / j ** 2)),
        "large": float(np.sum(p * j ** 2)),
        "gln": gln / total,
        "glnn": gln / total ** 2,
        "sn": sn / total,
        "snn": sn / total ** 2,
        "percentage": total / n_voxels,
        "glv": float(np.sum(p * (i - mu_i) ** 2)),
        "sv": float(np.sum(p * (j - mu_j) ** 2)),
        "entropy": _entropy(p.ravel()),
        "low": float(np.sum(p / i ** 2)),
        "high": float(np.sum(p * i ** 2)),
        "small_low": float(np.sum(p / (i ** 2 * j ** 2))),
        "small_high": float(np.sum(p * i ** 2 / j ** 2)),
        "large_low": float(np.sum(p * j ** 2 / i ** 2)),
        "large_high": float(np.sum(p * i ** 2 * j ** 2)),
    }


def _glrlm_single(P: np.ndarray, n_voxels: int) -> Dict[str, float]:
    f = _emphasis_family(P, n_voxels)
    return {
        "GrayLevelNonUniformity": f["gln"], "GrayLevelNonUniformityNormalized": f["glnn"],
        "GrayLevelVariance": f["glv"], "HighGrayLevelRunEmphasis": f["high"],
        "LongRunEmphasis": f["large"], "LongRunHighGrayLevelEmphasis": f["large_high"],
        "LongRunLowGrayLevelEmphasis": f["large_low"], "LowGrayLevelRunEmphasis": f["low"],
        "RunEntropy": f["entropy"], "RunLengthNonUniformity": f["sn"],
        "RunLengthNonUniformityNormalized": f["snn"], "RunPercentage": f["percentage"],
        "RunVariance": f["sv"], "ShortRunEmphasis": f["small"],
        "ShortRunHighGrayLevelEmphasis": f["small_high"], "ShortRunLowGrayLevelEmphasis": f["small_low"],
    }


def _glszm_features(P: np.ndarray, n_voxels: int) -> Dict[str, float]:
    f = _emphasis_family(P, n_voxels)
    return {
        "GrayLevelNonUniformity": f["gln"], "GrayLevelNonUniformityNormalized": f["glnn"],
        "GrayLevelVariance": f["glv"], "HighGrayLevelZoneEmphasis": f["high"],
        "LargeAreaEmphasis": f["large"], "LargeAreaHighGrayLevelEmphasis": f["large_high"],
        "LargeAreaLowGrayLevelEmphasis": f["large_low"], "LowGrayLevelZoneEmphasis": f["low"],
        "SizeZoneNonUniformity": f["sn"], "SizeZoneNonUniformityNormalized": f["snn"],
        "SmallAreaEmphasis": f["small"], "SmallAreaHighGrayLevelEmphasis": f["small_high"],
        "SmallAreaLowGrayLevelEmphasis": f["small_low"], "ZoneEntropy": f["entropy"],
        "ZonePercentage": f["percentage"], "ZoneVariance": f["sv"],
    }


def _gldm_features(P: np.ndarray, n_voxels: int) -> Dict[str, float]:
    # column c holds voxels with c equal neighbours; dependence size is c + 1
    f = _emphasis_family(P, n_voxels, size_offset=1)
    return {
        "DependenceEntropy": f["entropy"], "DependenceNonUniformity": f["sn"],
        "DependenceNonUniformityNormalized": f["snn"], "DependenceVariance": f["sv"],
        "GrayLevelNonUniformity": f["gln"], "GrayLevelVariance": f["glv"],
        "HighGrayLevelEmphasis": f["high"], "LargeDependenceEmphasis": f["large"],
        "LargeDependenceHighGrayLevelEmphasis": f["large_high"],
        "LargeDependenceLowGrayLevelEmphasis": f["large_low"], "LowGrayLevelEmphasis": f["low"],
        "SmallDependenceEmphasis": f["small"], "SmallDependenceHighGrayLevelEmphasis": f["small_high"],
        "SmallDependenceLowGrayLevelEmphasis": f["small_low"],
    }


def _ngtdm_features(T: np.ndarray) -> Dict[str, float]:
    n, p, s = T[:, 0], T[:, 1], T[:, 2]
    nvp = float(n.sum())
    if nvp == 0:
        return {"Busyness": 0.0, "Coarseness": COARSENESS_CAP, "Complexity": 0.0, "Contrast": 0.0, "Strength": 0.0}
    lv = np.arange(1, len(n) + 1, dtype=np.float64)
    on = p > 0
    i, pi, si = lv[on], p[on], s[on]
    ngp = int(on.sum())
    ps = float(np.sum(pi * si))
    s_sum = float(np.sum(si))
    d = i[:, None] - i[None, :]
    pp = pi[:, None] + pi[None, :]

    coarse = min(1.0 / ps, COARSENESS_CAP) if ps > 0 else COARSENESS_CAP
    contrast = (float(np.sum(pi[:, None] * pi[None, :] * d ** 2)) / (ngp * (ngp - 1)) * s_sum / nvp
                if ngp > 1 else 0.0)
    busy_den = float(np.sum(np.abs((i * pi)[:, None] - (i * pi)[None, :])))
    busy = ps / busy_den if busy_den > 0 else 0.0
    complexity = float(np.sum(np.abs(d) * ((pi * si)[:, None] + (pi * si)[None, :]) / pp)) / nvp
    strength = float(np.sum(pp * d ** 2)) / s_sum if s_sum > 0 else 0.0
    return {"Busyness": busy, "Coarseness": coarse, "Complexity": complexity, "Contrast": contrast, "Strength": strength}


def _directional_mean(mats, single) -> Dict[str, float]:
    per_dir = [single(P) for P in mats if P.sum() > 0]
    if not per_dir:
        return {}
    return {name: _mean_over([f[name] for f in per_dir]) for name in per_dir[0]}


def texture_features(kind: str, matrix: TextureMatrix) -> Dict[str, float]:
    if kind != matrix.kind:
        raise DataError(f"asked for {kind} features from a {matrix.kind} matrix")
    if kind == "GLCM":
        out = _directional_mean(matrix.table, lambda P: _glcm_single(P, matrix.n_levels))
        cls = "glcm"
    elif kind == "GLRLM":
        out = _directional_mean(matrix.table, lambda P: _glrlm_single(P, matrix.n_voxels))
        cls = "glrlm"
    elif kind == "GLSZM":
        out, cls = _glszm_features(matrix.table, matrix.n_voxels), "glszm"
    elif kind == "GLDM":
        out, cls = _gldm_features(matrix.table, matrix.n_voxels), "gldm"
    elif kind == "NGTDM":
        out, cls = _ngtdm_features(matrix.table), "ngtdm"
    else:
        raise DataError(f"unknown matrix kind {kind!r}")
    # a single-voxel ROI has no co-occurring pairs in any direction
    return {name: float(out.get(name, 0.0)) for name in CLASS_NAMES[cls]}


# ── full vector ───────────────────────────────────────────────────────────────

def extract_all(volume: VoxelVolume, segmentation: Segmentation, label: int,
                config: Optional[ExtractionConfig] = None, provenance: Optional[Dict] = None) -> FeatureVector:
    config = config or ExtractionConfig()
    roi = discretize(volume, segmentation, label, config.binning, config.bins, config.bin_width)
    region = segmentation.labels == label
    intensities = volume.data[region].astype(np.float64)
    levels = roi.levels[roi.levels > 0]

    groups = {
        "shape": shape_features(segmentation, label, volume.spacing),
        "firstorder": first_order(intensities, levels, float(np.prod(volume.spacing))),
    }
    for kind in TEXTURE_KINDS:
        groups[kind.lower()] = texture_features(kind, build_matrix(kind, roi))

    values = np.array([groups[c][n] for c in FEATURE_CLASSES for n in CLASS_NAMES[c]], dtype=np.float64)
    return FeatureVector(values, dict(provenance or {}))


# ── feature table ─────────────────────────────────────────────────────────────

def features_frame(vectors: Sequence[FeatureVector]) -> pd.DataFrame:
    return pd.DataFrame([v.as_row() for v in vectors], columns=list(PROVENANCE_COLUMNS) + list(FEATURE_NAMES))


def write_feature_table(table, path) -> Path:
    df = table if isinstance(table, pd.DataFrame) else features_frame(table)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False, float_format="%.17g", encoding="utf-8")
    log.info("📤 wrote %d feature rows → %s", len(df), out)
    return out


def read_feature_table(path) -> pd.DataFrame:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing feature table: {p}")
    df = pd.read_csv(p, dtype={"sample_id": int, "class": str, "sequence": str, "scan_id": str,
                               "observer": str, "seg_type": str}, float_precision="round_trip")
    expected = list(PROVENANCE_COLUMNS) + list(FEATURE_NAMES)
    if list(df.columns) != expected:
        raise DataError(f"{p}: header does not match the feature manifest")
    values = df[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{p}: non-finite feature values")
    return df
