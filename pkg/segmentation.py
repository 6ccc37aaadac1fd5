# segmentation.py — full (edge-threshold A/B), partial, observer and rotated segmentations from a ground-truth mask

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
from scipy import ndimage

from models import SegmentationError, SEG_TYPES, OBSERVERS
from phantomgen import LabelMask, ScanInstance, ScanMeta, VoxelVolume
from utils import derive_seed, read_volume_pair, write_volume_pair

log = logging.getLogger(__name__)

STRUCT6 = ndimage.generate_binary_structure(3, 1)
DEFAULT_PERCENTILE = {"A": 80.0, "B": 60.0}


@dataclass(frozen=True)
class Segmentation:
    mask: LabelMask
    seg_type: str
    observer: str
    source_scan: Optional[ScanMeta] = None
    info: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seg_type not in SEG_TYPES:
            raise SegmentationError(f"unknown seg_type {self.seg_type!r}")
        if self.observer not in OBSERVERS:
            raise SegmentationError(f"unknown observer {self.observer!r}")

    @property
    def labels(self) -> np.ndarray:
        return self.mask.labels

    def voxel_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=17)
        return {k: int(counts[k]) for k in range(1, counts.size) if counts[k]}


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2.0 * int(np.logical_and(a, b).sum()) / denom


def _label_boxes(labels: np.ndarray):
    """Bounding box of every present label, grown by one voxel (clamped to the volume)."""
    boxes = {}
    for i, sl in enumerate(ndimage.find_objects(labels.astype(np.int32))):
        if sl is None:
            continue
        boxes[i + 1] = tuple(slice(max(0, s.start - 1), min(n, s.stop + 1)) for s, n in zip(sl, labels.shape))
    return boxes


def inner_shell(region: np.ndarray) -> np.ndarray:
    return region & ~ndimage.binary_erosion(region, structure=STRUCT6, border_value=0)


def outer_shell(region: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(region, structure=STRUCT6) & ~region


def boundary_shell(labels: np.ndarray) -> np.ndarray:
    """Voxels of any label with a 6-neighbour outside that label (volume edge counts as outside)."""
    padded = np.pad(labels, 1, mode="constant", constant_values=0)
    core = padded[1:-1, 1:-1, 1:-1]
    shell = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        for step in (-1, 1):
            shell |= np.roll(padded, step, axis=ax)[1:-1, 1:-1, 1:-1] != core
    return shell & (labels > 0)


def _check_nonempty(before: np.ndarray, after: np.ndarray) -> None:
    want = set(np.unique(before)) - {0}
    have = set(np.unique(after)) - {0}
    lost = sorted(int(v) for v in want - have)
    if lost:
        raise SegmentationError(f"segmentation emptied labels {lost}")


def full_segmentation(gt: LabelMask, volume: VoxelVolume, variant: str, observer_seed: int, *,
                      percentile: Optional[float] = None, observer_jitter: float = 5.0,
                      gradient_sigma: float = 1.0, observer: str = "obs1",
                      source: Optional[ScanMeta] = None, seg_type: Optional[str] = None) -> Segmentation:
    """Gradient-percentile edge cut on each label's boundary shell.

    Variant A drops inner-shell voxels whose gradient magnitude exceeds the cut,
    variant B adds background outer-shell voxels above it. Percentile 100 accepts
    everything and returns the ground truth unchanged.
    """
    if variant not in DEFAULT_PERCENTILE:
        raise SegmentationError(f"variant must be A or B, got {variant!r}")
    if gt.dims != volume.dims:
        raise SegmentationError(f"mask {gt.dims} and volume {volume.dims} disagree")

    pct = DEFAULT_PERCENTILE[variant] if percentile is None else float(percentile)
    accept_all = pct >= 100.0
    if not accept_all and observer_jitter > 0:
        rng = np.random.default_rng(derive_seed("threshold", observer_seed, variant))
        pct = float(np.clip(pct + rng.uniform(-observer_jitter, observer_jitter), 0.0, 100.0))

    labels = gt.labels
    out = labels.copy()
    info = {"variant": variant, "percentile": 100.0 if accept_all else pct, "observer_seed": int(observer_seed)}

    if not accept_all:
        grad = ndimage.gaussian_gradient_magnitude(volume.data.astype(np.float64), sigma=gradient_sigma)
        claims = np.zeros(labels.shape, dtype=np.uint8)
        additions = []
        for lab, box in sorted(_label_boxes(labels).items()):
            sub = labels[box]
            region = sub == lab
            inner = inner_shell(region)
            outer = outer_shell(region) & (sub == 0)
            g = grad[box]
            thr = np.percentile(np.concatenate([g[inner], g[outer]]), pct)
            if variant == "A":
                out[box][inner & (g > thr)] = 0
            else:
                add = outer & (g > thr)
                claims[box][add] += 1
                additions.append((lab, box, add))
        # a background voxel wanted by two labels goes to neither
        for lab, box, add in additions:
            take = add & (claims[box] == 1)
            out[box][take] = lab

    _check_nonempty(labels, out)
    return Segmentation(LabelMask(out), seg_type or "full_" + variant, observer, source, info)


def partial_segmentation(full: Segmentation, fraction: float = 0.5) -> Segmentation:
    """Per label, the contiguous run of axial slices around the z-centroid holding ~fraction of its voxels."""
    if not 0 < fraction <= 1:
        raise SegmentationError(f"fraction must be in (0, 1], got {fraction}")
    labels = full.labels
    if fraction == 1:
        return replace(full, seg_type="partial", info={**full.info, "fraction": 1.0, "single_slice_labels": []})

    out = np.zeros_like(labels)
    single = []
    for lab, box in sorted(_label_boxes(labels).items()):
        region = labels[box] == lab
        per_slice = region.sum(axis=(0, 1)).astype(np.int64)
        z = np.nonzero(per_slice)[0]
        z0, z1 = int(z[0]), int(z[-1])
        if z0 == z1:
            single.append(lab)
            out[box][region] = lab
            continue
        total = int(per_slice.sum())
        centroid = float((per_slice * np.arange(per_slice.size)).sum()) / total
        target = fraction * total
        best = None
        for length in range(1, z1 - z0 + 2):
            start = int(math.floor(centroid - (length - 1) / 2.0 + 0.5))
            start = min(max(start, z0), z1 - length + 1)
            kept = int(per_slice[start:start + length].sum())
            err = abs(kept - target)
            if best is None or err < best[0]:
                best = (err, start, length)
        _, start, length = best
        keep = region.copy()
        keep[:, :, :start] = False
        keep[:, :, start + length:] = False
        out[box][keep] = lab

    if single:
        log.warning("⚠️ labels %s span one slice, kept whole in partial segmentation", single)
    info = {**full.info, "fraction": float(fraction), "single_slice_labels": single}
    return Segmentation(LabelMask(out), "partial", full.observer, full.source_scan, info)


def observer_variant(seg: Segmentation, observer_seed: int, p_obs: float = 0.25,
                     observer: Optional[str] = None) -> Segmentation:
    """Second-reader perturbation on the two-sided boundary band.

    Every inner-shell voxel leaves its label and every free outer-shell voxel joins
    the adjacent label with probability p_obs / 2, so p_obs is the expected share of
    the contour that moves, inward and outward alike. A background voxel touching
    two labels is never added.
    """
    labels = seg.labels
    out = labels.copy()
    if p_obs > 0:
        u = np.random.default_rng(derive_seed("observer", observer_seed)).random(labels.shape)
        hit = u < p_obs / 2.0
        out[boundary_shell(labels) & hit] = 0
        claims = np.zeros(labels.shape, dtype=np.uint8)
        additions = []
        for lab, box in sorted(_label_boxes(labels).items()):
            sub = labels[box]
            grow = outer_shell(sub == lab) & (sub == 0)
            claims[box][grow] += 1
            additions.append((lab, box, grow))
        for lab, box, grow in additions:
            out[box][grow & hit[box] & (claims[box] == 1)] = lab
        # never let a reader erase a whole ROI
        for lab in sorted(set(np.unique(labels)) - {0} - set(np.unique(out))):
            out[labels == lab] = lab
            log.warning("⚠️ observer flip would erase label %d, kept as is", lab)
    info = {**seg.info, "p_obs": float(p_obs), "observer_seed": int(observer_seed)}
    return Segmentation(LabelMask(out), seg.seg_type, observer or seg.observer, seg.source_scan, info)


def rotated_segmentation(rotated_scan: ScanInstance, variant: str, observer_seed: int, **kwargs) -> Segmentation:
    if not rotated_scan.meta.rotated:
        raise SegmentationError(f"scan {rotated_scan.meta.scan_id} is not rotated")
    return full_segmentation(rotated_scan.ground_truth_mask, rotated_scan.volume, variant, observer_seed,
                             source=rotated_scan.meta, seg_type="rotated_full", **kwargs)


def save_segmentation(seg: Segmentation, stem, spacing) -> None:
    meta = {"seg_type": seg.seg_type, "observer": seg.observer, "info": seg.info,
            "source_scan": seg.source_scan.as_dict() if seg.source_scan else None}
    write_volume_pair(stem, seg.labels, spacing, "labels", meta)


def load_segmentation(stem) -> Segmentation:
    labels, _, kind, meta = read_volume_pair(stem)
    if kind != "labels":
        raise SegmentationError(f"{stem}: not a label volume ({kind})")
    src = meta.get("source_scan")
    source = None
    if src:
        source = ScanMeta(sequence=src.get("sequence"), scan_id=str(src.get("scan_id")),
                          rotated=bool(src.get("rotated")), seed=int(src.get("seed", 0)),
                          classes=tuple(src.get("classes", ())))
    return Segmentation(LabelMask(labels), meta["seg_type"], meta["observer"], source, meta.get("info", {}))
