# phantomgen.py — procedural 16-fruit phantom, sequence contrast profiles, rescans, 90° rotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from models import (
    FRUIT_CLASSES, SEQUENCES, ContrastParams, FruitEntry, LayoutError, PhantomLayout,
    SequenceProfile, TextureParams, DataError,
)
from utils import derive_seed, read_volume_pair, write_volume_pair

log = logging.getLogger(__name__)

BACKGROUND_SIGMA = 1.0
CLEARANCE_MM = 0.5
CONTRAST_REF = 100.0
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


# ── types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VoxelVolume:
    data: np.ndarray                      # float32, indexed [x, y, z]
    spacing: Tuple[float, float, float]   # mm

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume dims must be 3 x >=1, got {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be 3 x >0, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume holds non-finite intensities")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray                    # uint16, 0 background, 1..16 fruit

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    def present(self) -> List[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


@dataclass(frozen=True)
class ScanMeta:
    sequence: Optional[str]
    scan_id: str
    rotated: bool
    seed: int
    classes: Tuple[str, ...] = field(default_factory=tuple)   # class of label k at index k-1

    def as_dict(self) -> Dict:
        return {"sequence": self.sequence, "scan_id": self.scan_id, "rotated": self.rotated,
                "seed": self.seed, "classes": list(self.classes)}


@dataclass(frozen=True)
class ScanInstance:
    volume: VoxelVolume
    ground_truth_mask: LabelMask
    meta: ScanMeta

    def __post_init__(self):
        if self.volume.dims != self.ground_truth_mask.dims:
            raise DataError(f"volume {self.volume.dims} and mask {self.ground_truth_mask.dims} disagree")


# ── built-in tables ───────────────────────────────────────────────────────────

_CLASS_GEOMETRY = {          # semi-axes (mm) before per-instance scaling
    "lime":  (6.0, 5.4, 11.0),
    "kiwi":  (6.4, 5.8, 17.0),
    "apple": (7.2, 6.8, 14.5),
    "onion": (7.6, 7.4, 10.0),
}

_CLASS_TEXTURE = {
    "kiwi":  TextureParams(base_intensity=180.0, texture_amplitude=30.0, texture_scale=4.0,
                           internal_structure_kind="radial_seeds"),
    "lime":  TextureParams(base_intensity=230.0, texture_amplitude=25.0, texture_scale=3.0,
                           internal_structure_kind="wedge_septa"),
    "apple": TextureParams(base_intensity=140.0, texture_amplitude=12.0, texture_scale=6.0,
                           internal_structure_kind="homogeneous_core"),
    "onion": TextureParams(base_intensity=270.0, texture_amplitude=35.0, texture_scale=5.0,
                           internal_structure_kind="concentric_shells"),
}

# rows are y, columns are x; no class touches itself horizontally or vertically
_GRID = (
    ("kiwi", "lime", "apple", "onion"),
    ("apple", "onion", "kiwi", "lime"),
    ("lime", "kiwi", "onion", "apple"),
    ("onion", "apple", "lime", "kiwi"),
)
_PITCH_MM = 22.0
_FIRST_MM = 15.0
_INSTANCE_SCALE = (1.00, 0.96, 1.04, 0.98)
_INSTANCE_TURN_DEG = (0.0, 25.0, 50.0, 75.0)


def _profile(name, contrast, noise_sigma, blur_fwhm, gain_jitter) -> SequenceProfile:
    return SequenceProfile(
        name=name,
        contrast_map={c: ContrastParams(gain=g, offset=o, gamma=p) for c, (g, o, p) in contrast.items()},
        noise_sigma=noise_sigma, blur_fwhm=blur_fwhm, gain_jitter=gain_jitter,
    )


# class intensity ordering differs between sequences; T2-MAP is quantitative (no gain drift)
DEFAULT_PROFILES: Dict[str, SequenceProfile] = {
    "T2-HASTE": _profile("T2-HASTE", {"kiwi": (0.8, 20.0, 0.9), "lime": (1.3, 0.0, 1.0),
                                      "apple": (1.5, 0.0, 1.1), "onion": (0.6, 0.0, 1.0)}, 14.0, 2.4, 0.25),
    "T2-TSE":   _profile("T2-TSE",   {"kiwi": (1.4, 0.0, 1.1), "lime": (0.7, 0.0, 0.9),
                                      "apple": (1.6, 10.0, 1.0), "onion": (0.9, 0.0, 1.2)}, 6.0, 1.4, 0.15),
    "T2-MAP":   _profile("T2-MAP",   {"kiwi": (1.0, 0.0, 1.0), "lime": (0.9, 10.0, 1.0),
                                      "apple": (1.2, 0.0, 1.0), "onion": (0.8, 20.0, 1.0)}, 3.0, 1.0, 0.0),
    "T1-TSE":   _profile("T1-TSE",   {"kiwi": (1.5, 0.0, 1.0), "lime": (0.5, 30.0, 1.0),
                                      "apple": (1.9, 0.0, 0.9), "onion": (0.45, 0.0, 1.0)}, 6.0, 1.2, 0.15),
    "T2-FLAIR": _profile("T2-FLAIR", {"kiwi": (0.6, 0.0, 1.0), "lime": (0.9, 0.0, 1.2),
                                      "apple": (1.0, 40.0, 1.0), "onion": (1.1, 0.0, 0.7)}, 9.0, 1.8, 0.2),
}


def identity_profile(name: str = "identity") -> SequenceProfile:
    return _profile(name, {c: (1.0, 0.0, 1.0) for c in FRUIT_CLASSES}, 0.0, 0.0, 0.0)


def resolve_profiles(overrides: Optional[Dict[str, SequenceProfile]] = None) -> Dict[str, SequenceProfile]:
    profiles = dict(DEFAULT_PROFILES)
    for name, prof in (overrides or {}).items():
        profiles[name] = prof if prof.name == name else prof.model_copy(update={"name": name})
    return {name: profiles[name] for name in SEQUENCES}


def default_layout(dims=(96, 96, 48), spacing=(1.0, 1.0, 2.0)) -> PhantomLayout:
    fruits = []
    seen = {c: 0 for c in FRUIT_CLASSES}
    zc = dims[2] * spacing[2] / 2.0
    for row, classes in enumerate(_GRID):
        for col, cls in enumerate(classes):
            k = seen[cls]
            seen[cls] += 1
            s = _INSTANCE_SCALE[k]
            a, b, c = _CLASS_GEOMETRY[cls]
            fruits.append(FruitEntry(
                instance_id=len(fruits) + 1,
                fruit_class=cls,
                center=(_FIRST_MM + col * _PITCH_MM, _FIRST_MM + row * _PITCH_MM, zc),
                semi_axes=(a * s, b * s, c * s),
                orientation_deg=_INSTANCE_TURN_DEG[k],
                texture_params=_CLASS_TEXTURE[cls],
            ))
    return PhantomLayout(dims=tuple(dims), spacing=tuple(spacing), fruits=fruits)


# ── geometry ──────────────────────────────────────────────────────────────────

def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def _half_extents(f: FruitEntry, pad: float = 0.0) -> Tuple[float, float, float]:
    a, b, c = (v + pad for v in f.semi_axes)
    t = math.radians(f.orientation_deg)
    hx = math.sqrt((a * math.cos(t)) ** 2 + (b * math.sin(t)) ** 2)
    hy = math.sqrt((a * math.sin(t)) ** 2 + (b * math.cos(t)) ** 2)
    return hx, hy, c


def _bbox(layout: PhantomLayout, f: FruitEntry, pad: float = 0.0):
    half = _half_extents(f, pad)
    box = []
    for ax in range(3):
        s, n = layout.spacing[ax], layout.dims[ax]
        lo = max(0, int(math.floor((f.center[ax] - half[ax]) / s - 0.5)))
        hi = min(n - 1, int(math.ceil((f.center[ax] + half[ax]) / s - 0.5)))
        box.append((lo, hi + 1))
    return box


def _local_coords(layout: PhantomLayout, f: FruitEntry, box):
    """Fruit-frame coordinates (mm) of every voxel centre in box."""
    axes = [(np.arange(lo, hi) + 0.5) * layout.spacing[ax] - f.center[ax] for ax, (lo, hi) in enumerate(box)]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    t = math.radians(f.orientation_deg)
    u = math.cos(t) * dx + math.sin(t) * dy
    v = -math.sin(t) * dx + math.cos(t) * dy
    return u, v, dz


def _inside(layout: PhantomLayout, f: FruitEntry, pad: float = 0.0):
    box = _bbox(layout, f, pad)
    u, v, w = _local_coords(layout, f, box)
    a, b, c = (x + pad for x in f.semi_axes)
    r2 = (u / a) ** 2 + (v / b) ** 2 + (w / c) ** 2
    return box, r2 <= 1.0, (u, v, w)


def validate_layout(layout: PhantomLayout) -> None:
    ids = sorted(f.instance_id for f in layout.fruits)
    if ids != list(range(1, 17)):
        raise LayoutError(f"instance ids must be exactly 1..16, got {ids}")
    counts = {c: sum(1 for f in layout.fruits if f.fruit_class == c) for c in FRUIT_CLASSES}
    if any(n != 4 for n in counts.values()):
        raise LayoutError(f"need exactly 4 instances per class, got {counts}")

    extent = layout.extent_mm()
    for f in layout.fruits:
        half = _half_extents(f)
        for ax in range(3):
            if f.center[ax] - half[ax] < 0 or f.center[ax] + half[ax] > extent[ax]:
                raise LayoutError(f"fruit {f.instance_id} ({f.fruit_class}) leaves the volume on axis {'xyz'[ax]}")

    owner = np.zeros(layout.dims, dtype=np.uint16)
    for f in sorted(layout.fruits, key=lambda e: e.instance_id):
        box, inside, _ = _inside(layout, f, pad=CLEARANCE_MM)
        sl = tuple(slice(lo, hi) for lo, hi in box)
        clash = owner[sl][inside]
        if np.any(clash):
            other = int(clash[clash > 0][0])
            raise LayoutError(f"fruits {other} and {f.instance_id} overlap")
        owner[sl][inside] = f.instance_id


# ── texture ───────────────────────────────────────────────────────────────────

def _value_noise(rng: np.random.Generator, coords, pitch: float) -> np.ndarray:
    """Seeded lattice noise in [-1, 1], trilinear between lattice points `pitch` mm apart."""
    u, v, w = coords
    grid = [(x - x.min()) / pitch for x in (u, v, w)]
    shape = tuple(int(math.ceil(g.max())) + 2 for g in grid)
    lattice = rng.uniform(-1.0, 1.0, size=shape)
    return ndimage.map_coordinates(lattice, [g.ravel() for g in grid], order=1, mode="nearest").reshape(u.shape)


def _structure(kind: str, u, v, w, semi) -> np.ndarray:
    a, b, c = semi
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2 + (w / c) ** 2)
    rxy = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    theta = np.arctan2(v / b, u / a)
    if kind == "concentric_shells":
        return np.cos(2.0 * np.pi * 4.0 * rho)
    if kind == "radial_seeds":
        band = np.exp(-((rxy - 0.55) / 0.12) ** 2)
        seeds = 0.5 + 0.5 * np.cos(12.0 * theta)
        core = np.exp(-(rxy / 0.2) ** 2)
        return -1.2 * band * seeds + 0.8 * core
    if kind == "wedge_septa":
        septa = np.exp(-(np.sin(5.0 * theta) / 0.15) ** 2)
        rind = np.exp(-((rho - 0.92) / 0.06) ** 2)
        return septa + 0.8 * rind - 0.3
    if kind == "homogeneous_core":
        return 0.4 * np.exp(-(rho / 0.25) ** 2) - 0.1 * rho ** 2
    raise LayoutError(f"unknown internal structure {kind!r}")


# ── operations ────────────────────────────────────────────────────────────────

def generate_phantom(layout: PhantomLayout, seed: int, scan_id: str = "1") -> ScanInstance:
    validate_layout(layout)
    data = _rng(seed, "background").normal(0.0, BACKGROUND_SIGMA, size=layout.dims)
    labels = np.zeros(layout.dims, dtype=np.uint16)
    classes = [""] * 16

    for f in sorted(layout.fruits, key=lambda e: e.instance_id):
        box, inside, (u, v, w) = _inside(layout, f)
        tp = f.texture_params
        if tp.texture_amplitude > 0:
            noise = _value_noise(_rng(seed, "texture", f.instance_id), (u, v, w), tp.texture_scale)
            texture = _structure(tp.internal_structure_kind, u, v, w, f.semi_axes) + 0.5 * noise
            values = tp.base_intensity + tp.texture_amplitude * texture
        else:
            values = np.full(u.shape, tp.base_intensity)
        sl = tuple(slice(lo, hi) for lo, hi in box)
        data[sl][inside] = values[inside]
        labels[sl][inside] = f.instance_id
        classes[f.instance_id - 1] = f.fruit_class

        sub = labels[sl] == f.instance_id
        n_comp = ndimage.label(sub)[1]
        if n_comp != 1:
            raise LayoutError(f"fruit {f.instance_id} rasterises to {n_comp} components")

    meta = ScanMeta(sequence=None, scan_id=str(scan_id), rotated=False, seed=int(seed), classes=tuple(classes))
    return ScanInstance(VoxelVolume(data.astype(np.float32), tuple(layout.spacing)), LabelMask(labels), meta)


def jitter_layout(layout: PhantomLayout, rng: np.random.Generator, jitter_mm: float, jitter_deg: float) -> PhantomLayout:
    fruits = []
    for f in layout.fruits:
        shift = rng.uniform(-jitter_mm, jitter_mm, size=3) if jitter_mm > 0 else np.zeros(3)
        turn = rng.uniform(-jitter_deg, jitter_deg) if jitter_deg > 0 else 0.0
        fruits.append(f.model_copy(update={
            "center": tuple(float(c + d) for c, d in zip(f.center, shift)),
            "orientation_deg": float(f.orientation_deg + turn),
        }))
    return layout.model_copy(update={"fruits": fruits})


def rescan(layout: PhantomLayout, seed: int, jitter_mm: float = 5.0, jitter_deg: float = 10.0,
           max_retries: int = 200, scan_id: str = "1") -> ScanInstance:
    """Repositioned acquisition: every fruit's centre and in-plane orientation jittered, then generated."""
    last = None
    for attempt in range(max_retries):
        candidate = jitter_layout(layout, _rng(seed, "rescan", attempt), jitter_mm, jitter_deg)
        try:
            validate_layout(candidate)
        except LayoutError as e:
            last = e
            continue
        if attempt:
            log.debug("rescan seed=%s placed after %d retries", seed, attempt)
        return generate_phantom(candidate, seed, scan_id=scan_id)
    raise LayoutError(f"rescan seed={seed}: no valid placement in {max_retries} attempts ({last})")


_ROT_AXES = {"z": (0, 1), "x": (1, 2), "y": (2, 0)}


def rotate90(instance: ScanInstance, axis: str = "z", scan_id: Optional[str] = None) -> ScanInstance:
    """Exact 90° grid rotation (index remap, no interpolation) of volume and mask together."""
    if axis not in _ROT_AXES:
        raise DataError(f"axis must be one of x, y, z, got {axis!r}")
    axes = _ROT_AXES[axis]
    data = np.ascontiguousarray(np.rot90(instance.volume.data, k=1, axes=axes))
    labels = np.ascontiguousarray(np.rot90(instance.ground_truth_mask.labels, k=1, axes=axes))
    spacing = list(instance.volume.spacing)
    spacing[axes[0]], spacing[axes[1]] = spacing[axes[1]], spacing[axes[0]]
    if scan_id is None:
        scan_id = f"R{instance.meta.scan_id}" if instance.meta.scan_id in ("1", "2") else instance.meta.scan_id
    meta = replace(instance.meta, rotated=True, scan_id=scan_id)
    return ScanInstance(VoxelVolume(data, tuple(spacing)), LabelMask(labels), meta)


def apply_sequence(base: ScanInstance, profile: SequenceProfile, seed: int) -> ScanInstance:
    """Per-class monotone contrast inside ROIs, receiver gain drift, Gaussian blur, additive noise."""
    labels = base.ground_truth_mask.labels
    data = base.volume.data.astype(np.float64)

    gain = np.ones(17)
    offset = np.zeros(17)
    gamma = np.ones(17)
    for k, cls in enumerate(base.meta.classes, start=1):
        cp = profile.contrast_map[cls]
        gain[k], offset[k], gamma[k] = cp.gain, cp.offset, cp.gamma

    inside = labels > 0
    x = data[inside]
    lab = labels[inside]
    g, o, p = gain[lab], offset[lab], gamma[lab]
    linear = p == 1.0
    y = np.empty_like(x)
    y[linear] = g[linear] * x[linear] + o[linear]
    nl = ~linear
    if np.any(nl):
        y[nl] = g[nl] * CONTRAST_REF * (np.maximum(x[nl], 0.0) / CONTRAST_REF) ** p[nl] + o[nl]
    data[inside] = y

    rng = _rng(seed, "sequence", profile.name)
    if profile.gain_jitter > 0:
        data *= 1.0 + rng.uniform(-profile.gain_jitter, profile.gain_jitter)
    if profile.blur_fwhm > 0:
        sigma = [profile.blur_fwhm * FWHM_TO_SIGMA / s for s in base.volume.spacing]
        data = ndimage.gaussian_filter(data, sigma=sigma, mode="nearest")
    if profile.noise_sigma > 0:
        data = data + rng.normal(0.0, profile.noise_sigma, size=data.shape)

    meta = replace(base.meta, sequence=profile.name)
    return ScanInstance(VoxelVolume(data.astype(np.float32), base.volume.spacing), base.ground_truth_mask, meta)


# ── files ─────────────────────────────────────────────────────────────────────

def save_scan(instance: ScanInstance, stem) -> None:
    meta = instance.meta.as_dict()
    write_volume_pair(stem, instance.volume.data, instance.volume.spacing, "intensity", meta)
    write_volume_pair(f"{stem}_mask", instance.ground_truth_mask.labels, instance.volume.spacing, "labels", meta)


def load_scan(stem) -> ScanInstance:
    data, spacing, kind, meta = read_volume_pair(stem)
    labels, mspacing, mkind, _ = read_volume_pair(f"{stem}_mask")
    if kind != "intensity" or mkind != "labels":
        raise DataError(f"{stem}: expected intensity + labels pair, got {kind}/{mkind}")
    scan_meta = ScanMeta(sequence=meta.get("sequence"), scan_id=str(meta.get("scan_id")),
                         rotated=bool(meta.get("rotated")), seed=int(meta.get("seed", 0)),
                         classes=tuple(meta.get("classes", ())))
    return ScanInstance(VoxelVolume(data, spacing), LabelMask(labels), scan_meta)
