"""
FastAPI backend that serves a finished pipeline run:
1. The run manifest (funnel, counts, versions, seeds)
2. Plot-ready series by name
3. The ranked ISP comparison table

Read-only. The artifact directory comes from ISPM_ARTIFACT_DIR.
"""

import json
import logging
import os
import sys
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

import pandas as pd
from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

load_dotenv()

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine import __version__
from engine.config import env_artifact_dir
from engine.report import MANIFEST_NAME

logger = logging.getLogger("api")

# Request/Response Models

class HealthResponse(BaseModel):
    """Response model for the /health endpoint."""
    status: str
    artifact_dir: str
    manifest_present: bool


class SeriesIndex(BaseModel):
    """Response model for the /series endpoint."""
    series: dict[str, str] = Field(description="Series name -> file, relative to the artifact directory")


class SeriesResponse(BaseModel):
    """Response model for /series/{name}."""
    name: str
    kind: str | None = None
    metadata: dict[str, Any] = Field(default_factory=dict)
    columns: list[str]
    rows: list[dict[str, Any]]


class RankedResponse(BaseModel):
    """Response model for the /ranked endpoint."""
    row_count: int
    rows: list[dict[str, Any]]


# Artifact access

def artifact_dir() -> Path:
    return env_artifact_dir()


def _read_manifest() -> dict:
    path = artifact_dir() / MANIFEST_NAME
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"no manifest in {artifact_dir()}")
    return json.loads(path.read_text(encoding="utf-8"))


def _csv_rows(path: Path) -> tuple[list[str], list[dict[str, Any]]]:
    frame = pd.read_csv(path)
    frame = frame.astype(object).where(frame.notna(), None)
    return list(frame.columns), frame.to_dict(orient="records")


# App Lifecycle

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Startup and shutdown events."""
    logger.info("Starting ISP match artifact server on %s", artifact_dir())
    if not (artifact_dir() / MANIFEST_NAME).is_file():
        logger.warning("no %s under %s; run the pipeline first", MANIFEST_NAME, artifact_dir())
    yield
    logger.info("Shutting down...")


app = FastAPI(
    title="ISP Match",
    description="Read-only access to speed-test pipeline artifacts: series, manifest and ranked ISP comparisons",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Endpoints

@app.get("/", response_model=dict)
async def root():
    """Root endpoint."""
    return {
        "service": "ISP Match",
        "version": __version__,
        "endpoints": {
            "GET /health": "Check service health",
            "GET /manifest": "Run manifest",
            "GET /series": "List plot series",
            "GET /series/{name}": "One plot series",
            "GET /ranked": "Ranked ISP comparison table",
        },
    }


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint."""
    present = (artifact_dir() / MANIFEST_NAME).is_file()
    return HealthResponse(
        status="healthy" if present else "degraded",
        artifact_dir=str(artifact_dir()),
        manifest_present=present,
    )


@app.get("/manifest", response_model=dict)
async def manifest():
    return _read_manifest()


@app.get("/series", response_model=SeriesIndex)
async def list_series():
    return SeriesIndex(series=_read_manifest().get("series", {}))


@app.get("/series/{name}", response_model=SeriesResponse)
async def get_series(name: str):
    """
    One series by name. Only names listed in the manifest are served.
    """
    filename = _read_manifest().get("series", {}).get(name)
    if filename is None:
        raise HTTPException(status_code=404, detail=f"unknown series {name!r}")
    path = artifact_dir() / filename
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"series file missing: {filename}")

    if path.suffix == ".json":
        payload = json.loads(path.read_text(encoding="utf-8"))
        return SeriesResponse(
            name=name,
            kind=payload.get("kind"),
            metadata=payload.get("metadata", {}),
            columns=payload.get("columns", []),
            rows=payload.get("rows", []),
        )
    columns, rows = _csv_rows(path)
    return SeriesResponse(name=name, columns=columns, rows=rows)


@app.get("/ranked", response_model=RankedResponse)
async def ranked():
    path = artifact_dir() / "ranked.csv"
    if not path.is_file():
        raise HTTPException(status_code=404, detail="no ranked table; the run had no ISP pairs")
    _, rows = _csv_rows(path)
    return RankedResponse(row_count=len(rows), rows=rows)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
