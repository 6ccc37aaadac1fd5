# cli.py — batch entry point: gen → extract → run → report (argparse + pydantic RunConfig)

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from models import (
    OBSERVERS, ROTATED_SCANS, SCAN_IDS, SEQUENCES, ConfigError, DataError, RunConfig,
    ScenarioError, ShiftForgeError,
)
from phantomgen import apply_sequence, default_layout, load_scan, rescan, resolve_profiles, rotate90, save_scan
from radiomics import extract_all, features_frame, write_feature_table
from scenarios import Dataset, run_all, write_summary
from segmentation import (
    full_segmentation, observer_variant, partial_segmentation, rotated_segmentation, save_segmentation,
)
from utils import FEATURES_CSV, LOG_LEVEL, REPORT_DIR, SEG_DIR, derive_seed, ensure_dirs, read_json, safe, volume_stem
from workers import run_bounded

log = logging.getLogger("shiftforge")
UNEXPECTED_EXIT = 4   # anything that is not a ShiftForgeError


def setup_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def load_config(path: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    raw: Dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from e
    if out:
        config = config.model_copy(update={"output_dir": out})
    if seed is not None:
        # --seed moves the phantom only; learner and observer seeds stay put
        config = config.model_copy(update={"phantom": config.phantom.model_copy(update={"seed": seed})})
    return config


# ── gen ───────────────────────────────────────────────────────────────────────

def scan_geometry(config: RunConfig):
    """One repositioned geometry per scan id, shared by every sequence."""
    ph = config.phantom
    layout = ph.layout or default_layout(ph.dims, ph.spacing)
    bases = {}
    for scan_id in SCAN_IDS:
        seed = derive_seed(ph.seed, "scan", scan_id)
        base = rescan(layout, seed, ph.jitter_mm, ph.jitter_deg, ph.max_retries, scan_id=scan_id.lstrip("R"))
        bases[scan_id] = rotate90(base, ph.rotation_axis, scan_id=scan_id) if scan_id in ROTATED_SCANS else base
    return bases


def cmd_gen(config: RunConfig) -> List[Path]:
    out = Path(config.output_dir)
    ensure_dirs(out)
    profiles = resolve_profiles(config.sequences.profiles)
    bases = scan_geometry(config)

    def job(item: Tuple[str, str]) -> Path:
        seq, scan_id = item
        inst = apply_sequence(bases[scan_id], profiles[seq], derive_seed(config.phantom.seed, "acq", seq, scan_id))
        stem = volume_stem(out, seq, scan_id)
        save_scan(inst, stem)
        return stem

    stems = run_bounded(job, [(s, k) for s in SEQUENCES for k in SCAN_IDS])
    log.info("📤 wrote %d volume/mask pairs under %s", len(stems), out)
    return stems


# ── extract ───────────────────────────────────────────────────────────────────

def scan_segmentations(inst, config: RunConfig):
    """All segmentations of one scan, in canonical (observer, seg_type) order."""
    sc = config.segmentation
    seq, scan_id = inst.meta.sequence, inst.meta.scan_id
    kw = dict(observer_jitter=sc.observer_jitter, gradient_sigma=sc.gradient_sigma)
    segs = []
    for obs in OBSERVERS:
        def seeds(variant):
            return (derive_seed(config.phantom.seed, "edge", obs, seq, scan_id, variant),
                    derive_seed(config.phantom.seed, "reader", obs, seq, scan_id, variant))

        if inst.meta.rotated:
            edge, reader = seeds("A")
            seg = rotated_segmentation(inst, "A", edge, percentile=sc.percentile_a, observer=obs, **kw)
            segs.append(observer_variant(seg, reader, sc.p_obs, observer=obs))
            continue
        full = {}
        for variant, pct in (("A", sc.percentile_a), ("B", sc.percentile_b)):
            edge, reader = seeds(variant)
            seg = full_segmentation(inst.ground_truth_mask, inst.volume, variant, edge, percentile=pct,
                                    observer=obs, source=inst.meta, **kw)
            full[variant] = observer_variant(seg, reader, sc.p_obs, observer=obs)
        segs += [full["A"], full["B"], partial_segmentation(full["A"], sc.fraction)]
    return segs


def cmd_extract(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    items = [(s, k) for s in SEQUENCES for k in SCAN_IDS]
    missing = [str(volume_stem(out, s, k)) for s, k in items
               if not volume_stem(out, s, k).with_name(volume_stem(out, s, k).name + ".vol.json").exists()]
    if missing:
        raise DataError("missing volumes (run `gen` first): " + ", ".join(missing))

    def job(item: Tuple[str, str]):
        seq, scan_id = item
        inst = load_scan(volume_stem(out, seq, scan_id))
        rows = []
        for seg in scan_segmentations(inst, config):
            save_segmentation(seg, out / SEG_DIR / safe(f"{seq}_scan{scan_id}_{seg.observer}_{seg.seg_type}"),
                              inst.volume.spacing)
            for label in range(1, len(inst.meta.classes) + 1):
                prov = {"sample_id": label, "class": inst.meta.classes[label - 1], "sequence": seq,
                        "scan_id": scan_id, "observer": seg.observer, "seg_type": seg.seg_type}
                rows.append(extract_all(inst.volume, seg, label, config.extraction, prov))
        log.info("📥 %s scan %s: %d feature rows", seq, scan_id, len(rows))
        return rows

    vectors = [v for rows in run_bounded(job, items) for v in rows]
    return write_feature_table(features_frame(vectors), out / FEATURES_CSV)


# ── run / report ──────────────────────────────────────────────────────────────

def cmd_run(config: RunConfig) -> List[Dict]:
    out = Path(config.output_dir)
    data = Dataset.from_csv(out / FEATURES_CSV)
    reports, failures = run_all(config, data, out)
    if failures:
        raise ScenarioError("; ".join(f"{name}: {msg}" for name, msg in failures))
    log.info("✅ %d scenario reports written", len(reports))
    return reports


def load_reports(run_dir) -> List[Dict]:
    rdir = Path(run_dir) / REPORT_DIR
    reports = []
    for p in sorted(rdir.glob("*.json")):
        doc = read_json(p)
        if isinstance(doc, dict) and doc.get("schema") == 1 and "scenario" in doc:
            reports.append(doc)
    return reports


def cmd_report(config: RunConfig, serve: bool = False, host: str = "0.0.0.0", port: int = 8000) -> pd.DataFrame:
    out = Path(config.output_dir)
    reports = load_reports(out)
    if not reports:
        raise DataError(f"no reports under {out / REPORT_DIR} (run `run` first)")
    path = write_summary(reports, out / REPORT_DIR / "summary.csv")
    table = pd.read_csv(path)
    print(table[["scenario", "cell", "role", "f1", "ece", "ece_calibrated", "ratio_f1"]].to_string(index=False))
    if serve:
        import uvicorn
        os.environ["SHIFTFORGE_RUN_DIR"] = str(out)
        log.info("🌐 serving %s on http://%s:%d", out, host, port)
        uvicorn.run("app:app", host=host, port=port)
    return table


# ── entry ─────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftforge", description="Radiomics distribution-shift lab on a synthetic phantom.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="phantom seed (overrides phantom.seed only)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write phantom volumes and masks")
    sub.add_parser("extract", parents=[common], help="segment every scan and write features.csv")
    sub.add_parser("run", parents=[common], help="run configured scenarios and write reports")
    rep = sub.add_parser("report", parents=[common], help="summarise reports; --serve to browse them")
    rep.add_argument("--serve", action="store_true")
    rep.add_argument("--host", default="0.0.0.0")
    rep.add_argument("--port", type=int, default=int(os.getenv("PORT", "8000")))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        config = load_config(args.config, args.out, args.seed)
        if args.command == "gen":
            cmd_gen(config)
        elif args.command == "extract":
            cmd_extract(config)
        elif args.command == "run":
            cmd_run(config)
        else:
            cmd_report(config, args.serve, args.host, args.port)
    except ShiftForgeError as e:
        log.error("❌ %s", e)
        return e.exit_code
    except Exception:
        log.exception("❌ unexpected failure in %s", args.command)
        return UNEXPECTED_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
