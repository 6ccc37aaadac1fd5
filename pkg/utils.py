# utils.py — settings, paths, stable seeds, volume file codec, json/csv writers

import os, json, hashlib, math
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from models import DataError

RUN_DIR     = os.getenv("SHIFTFORGE_RUN_DIR", "runs/default")
MAX_WORKERS = int(os.getenv("SHIFTFORGE_WORKERS", "4"))
LOG_LEVEL   = os.getenv("SHIFTFORGE_LOG_LEVEL", "INFO").upper()

VOLUME_DIR  = "volumes"
SEG_DIR     = "segmentations"
REPORT_DIR  = "reports"
FEATURES_CSV = "features.csv"

_DTYPES = {"f32": "<f4", "u16": "<u2"}


def ensure_dirs(*dirs) -> None:
    for d in dirs:
        os.makedirs(d, exist_ok=True)


def safe(name: str) -> str:
    return "".join(c for c in (name or "file") if c.isalnum() or c in ("-", "_", "."))[:120]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any printable parts (platform and PYTHONHASHSEED independent)."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_stable(obj: Any) -> str:
    # repr-based float output is shortest round-trip and identical across platforms
    return json.dumps(to_jsonable(obj), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path, obj: Any) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_stable(obj), encoding="utf-8")
    return out


def read_json(path) -> Any:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"bad json in {p}: {e}") from e


# ── volume/mask file pair: <stem>.vol.json + <stem>.vol.raw (little endian, x fastest) ──

def write_volume_pair(stem, array: np.ndarray, spacing, kind: str, meta: Optional[Dict] = None) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dtype = "f32" if kind == "intensity" else "u16"
    data = np.asarray(array).astype(_DTYPES[dtype], copy=False)
    raw_path = stem.with_name(stem.name + ".vol.raw")
    json_path = stem.with_name(stem.name + ".vol.json")
    raw_path.write_bytes(data.ravel(order="F").tobytes())
    write_json(json_path, {
        "dims": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "byte_order": "little",
        "kind": kind,
        "meta": meta or {},
    })
    return json_path, raw_path


def read_volume_pair(stem) -> Tuple[np.ndarray, Tuple[float, float, float], str, Dict]:
    stem = Path(stem)
    side = read_json(stem.with_name(stem.name + ".vol.json"))
    raw_path = stem.with_name(stem.name + ".vol.raw")
    if not raw_path.exists():
        raise DataError(f"missing file: {raw_path}")
    if side.get("byte_order") != "little" or side.get("dtype") not in _DTYPES:
        raise DataError(f"unsupported sidecar in {stem}: {side.get('dtype')}/{side.get('byte_order')}")
    dims = tuple(int(d) for d in side["dims"])
    buf = np.frombuffer(raw_path.read_bytes(), dtype=_DTYPES[side["dtype"]])
    if buf.size != int(np.prod(dims)):
        raise DataError(f"{raw_path}: {buf.size} values, sidecar says {dims}")
    arr = buf.reshape(dims, order="F")
    arr = arr.astype(np.float32) if side["dtype"] == "f32" else arr.astype(np.uint16)
    return arr, tuple(float(s) for s in side["spacing"]), side["kind"], side.get("meta", {})


def volume_stem(root, sequence: str, scan_id: str, suffix: str = "") -> Path:
    return Path(root) / VOLUME_DIR / safe(f"{sequence}_scan{scan_id}{suffix}")


def fmt_float(x: float) -> str:
    return repr(float(x))
