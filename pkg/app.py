# app.py — read-only browser for scenario reports of one run directory

import os, json
from pathlib import Path
from typing import Optional

import aiofiles
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from utils import REPORT_DIR, RUN_DIR, ensure_dirs, safe

APP_TITLE = "ShiftForge Radiomics Lab"
APP_VERSION = "1.0.0"

PUBLIC_BASE = os.getenv("PUBLIC_BASE", "").rstrip("/")
CORS_ORIGINS = [o for o in os.getenv("SHIFTFORGE_CORS", "http://localhost,http://localhost:5173").split(",") if o]
ARTIFACT_SUFFIXES = (".json", ".csv")


def abs_url(request: Request, path: Optional[str]) -> Optional[str]:
    if not path: return None
    if path.startswith("http://") or path.startswith("https://"): return path
    base = PUBLIC_BASE or str(request.base_url).rstrip("/")
    return f"{base}{path}"


def create_app(run_dir: Optional[str] = None) -> FastAPI:
    root = Path(run_dir or os.getenv("SHIFTFORGE_RUN_DIR", RUN_DIR))
    report_dir = root / REPORT_DIR
    ensure_dirs(report_dir)

    app = FastAPI(title=APP_TITLE, version=APP_VERSION)
    app.mount("/media/reports", StaticFiles(directory=str(report_dir)), name="reports")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=CORS_ORIGINS,
        allow_credentials=True,
        allow_methods=["GET", "HEAD"],
        allow_headers=["*"],
    )

    def report_names():
        out = []
        for p in sorted(report_dir.glob("*.json")):
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                continue
            if isinstance(doc, dict) and doc.get("schema") == 1 and "scenario" in doc:
                out.append(p.stem)
        return out

    @app.get("/")
    def health_get():
        return {"ok": True, "service": APP_TITLE, "version": APP_VERSION}

    @app.head("/")
    def health_head():
        return Response(status_code=200)

    @app.get("/api/health")
    def health_api():
        return {"ok": True, "run_dir": str(root)}

    @app.get("/reports")
    def list_reports(request: Request):
        names = report_names()
        return {"ok": True, "reports": [
            {"name": n, "url": abs_url(request, f"/reports/{n}"),
             "download_url": abs_url(request, f"/download/{n}.json")} for n in names
        ], "summary_url": abs_url(request, "/download/summary.csv") if (report_dir / "summary.csv").exists() else None}

    @app.get("/reports/{name}")
    async def get_report(name: str):
        clean = safe(name)
        if clean != name:
            raise HTTPException(status_code=400, detail="bad report name")
        path = report_dir / f"{clean}.json"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no report named {name}")
        async with aiofiles.open(path, "r", encoding="utf-8") as f:
            text = await f.read()
        try:
            return JSONResponse(json.loads(text))
        except json.JSONDecodeError:
            return JSONResponse({"ok": False, "error": f"{name} is not valid JSON"}, 500)

    @app.get("/download/{filename:path}")
    def download(filename: str):
        target = (report_dir / filename).resolve()
        if report_dir.resolve() not in target.parents or target.suffix not in ARTIFACT_SUFFIXES:
            raise HTTPException(status_code=400, detail="bad filename")
        if not target.exists():
            raise HTTPException(status_code=404, detail="not found")
        media = "application/json" if target.suffix == ".json" else "text/csv"
        return FileResponse(str(target), media_type=media, filename=target.name)

    return app


app = create_app()
