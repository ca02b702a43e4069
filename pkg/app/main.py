import logging
import os
from contextlib import asynccontextmanager

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from sqlalchemy.orm import Session

from app.database import Base, engine, get_db
from app.errors import BenchmarkError, MetricUndefinedError
from app.schemas import (
    BenchmarkRunOut,
    DetectorInfo,
    EvaluateRequest,
    MetricReport,
    PRCurve,
    RankingRequest,
    RankingRow,
)
from app.security import validate_request_auth
from app.services import detectors, evalkit
from app.services.benchproto import rank_methods
from app.services.result_store import ResultStore

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(_: FastAPI):
    Base.metadata.create_all(bind=engine)
    yield


app = FastAPI(
    title="Anomaly Benchmark API",
    version="1.0.0",
    description=(
        "Read-only access to the anomaly detection benchmark toolkit: detector "
        "registry, pointwise metrics, rank aggregation and benchmark history."
    ),
    lifespan=lifespan,
)

# ── CORS: local dev plus anything in CORS_ORIGINS ───────────────────────────
_CORS_ORIGINS = [
    "http://localhost:5173",
    "http://localhost:3000",
]
_extra = os.getenv("CORS_ORIGINS", "")
if _extra:
    _CORS_ORIGINS.extend([o.strip() for o in _extra.split(",") if o.strip()])

app.add_middleware(
    CORSMiddleware,
    allow_origins=_CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

result_store = ResultStore()


@app.middleware("http")
async def auth_middleware(request: Request, call_next):
    try:
        validate_request_auth(request)
    except HTTPException as exc:
        return JSONResponse(status_code=exc.status_code, content={"detail": exc.detail})
    return await call_next(request)


def _http_error(exc: BenchmarkError) -> HTTPException:
    status = 422 if isinstance(exc, MetricUndefinedError) else 400
    return HTTPException(status_code=status, detail=str(exc))


# ── Health ────────────────────────────────────────────────────────────────────

@app.get("/", tags=["Health"])
def root() -> dict[str, str]:
    return {"status": "running", "docs": "/docs", "version": "1.0.0"}


@app.get("/healthz", tags=["Health"])
def healthz() -> dict[str, str]:
    return {"status": "ok"}


# ── Detectors ─────────────────────────────────────────────────────────────────

@app.get("/detectors", response_model=list[DetectorInfo], tags=["Detectors"])
def list_detectors() -> list[DetectorInfo]:
    return detectors.registry()


# ── Metrics ───────────────────────────────────────────────────────────────────

@app.post("/metrics/evaluate", response_model=MetricReport, tags=["Metrics"])
def evaluate_scores(payload: EvaluateRequest) -> MetricReport:
    try:
        return evalkit.evaluate(payload.scores, payload.labels)
    except BenchmarkError as exc:
        raise _http_error(exc) from exc


@app.post("/metrics/pr-curve", response_model=PRCurve, tags=["Metrics"])
def precision_recall_curve(payload: EvaluateRequest) -> PRCurve:
    try:
        return evalkit.pr_curve(payload.scores, payload.labels)
    except BenchmarkError as exc:
        raise _http_error(exc) from exc


# ── Rankings & history ────────────────────────────────────────────────────────

@app.post("/rankings", response_model=list[RankingRow], tags=["Rankings"])
def create_ranking(payload: RankingRequest, db: Session = Depends(get_db)) -> list[RankingRow]:
    try:
        rows = rank_methods(payload.rows)
    except BenchmarkError as exc:
        raise _http_error(exc) from exc
    result_store.save_ranking(db, rows)
    db.commit()
    logger.info("Saved ranking of %d methods", len(rows))
    return rows


@app.get("/rankings/latest", response_model=list[RankingRow], tags=["Rankings"])
def latest_ranking(db: Session = Depends(get_db)) -> list[RankingRow]:
    return result_store.latest_ranking(db)


@app.get("/benchmarks", response_model=list[BenchmarkRunOut], tags=["Rankings"])
def list_benchmarks(
    method: str | None = Query(default=None),
    limit: int = Query(default=50, ge=1, le=500),
    db: Session = Depends(get_db),
) -> list[BenchmarkRunOut]:
    return result_store.list_benchmarks(db, method=method, limit=limit)
