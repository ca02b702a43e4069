from __future__ import annotations

import uuid
from collections.abc import Sequence

from sqlalchemy import select
from sqlalchemy.orm import Session, selectinload

from app.models import BenchmarkRun, FoldOutcomeRecord, RankingEntry
from app.schemas import BenchmarkResult, BenchmarkRunOut, FoldOutcome, RankingRow


class ResultStore:
    """Benchmark history. Callers own the transaction (flush here, commit outside)."""

    def save_benchmark(self, db: Session, result: BenchmarkResult, *, seed: int = 0) -> BenchmarkRun:
        row = BenchmarkRun(
            method=result.method,
            method_type=result.method_type,
            best_f1=result.best_f1,
            auprc=result.auprc,
            configs_evaluated=result.configs_evaluated,
            configs_total=result.configs_total,
            seed=seed,
            warnings=list(result.warnings),
        )
        row.folds = [
            FoldOutcomeRecord(
                fold=fold.fold,
                selected_config=fold.selected_config,
                selection_f1=fold.selection_f1,
                best_f1=fold.best_f1,
                auprc=fold.auprc,
            )
            for fold in result.folds
        ]
        db.add(row)
        db.flush()
        return row

    def save_ranking(self, db: Session, rows: Sequence[RankingRow]) -> str:
        batch_id = uuid.uuid4().hex
        for row in rows:
            db.add(RankingEntry(batch_id=batch_id, **row.model_dump()))
        db.flush()
        return batch_id

    def list_benchmarks(self, db: Session, *, method: str | None = None, limit: int = 50) -> list[BenchmarkRunOut]:
        stmt = select(BenchmarkRun).options(selectinload(BenchmarkRun.folds))
        if method:
            stmt = stmt.where(BenchmarkRun.method == method)
        rows = db.scalars(stmt.order_by(BenchmarkRun.created_at.desc(), BenchmarkRun.id.desc()).limit(limit)).all()
        return [
            BenchmarkRunOut(
                id=row.id,
                method=row.method,
                method_type=row.method_type,
                best_f1=row.best_f1,
                auprc=row.auprc,
                configs_evaluated=row.configs_evaluated,
                configs_total=row.configs_total,
                warnings=list(row.warnings or []),
                created_at=row.created_at,
                folds=[
                    FoldOutcome(
                        fold=f.fold,
                        selected_config=f.selected_config or {},
                        selection_f1=f.selection_f1,
                        best_f1=f.best_f1,
                        auprc=f.auprc,
                    )
                    for f in row.folds
                ],
            )
            for row in rows
        ]

    def latest_ranking(self, db: Session) -> list[RankingRow]:
        newest = db.scalars(select(RankingEntry).order_by(RankingEntry.id.desc()).limit(1)).first()
        if newest is None:
            return []
        entries = db.scalars(
            select(RankingEntry)
            .where(RankingEntry.batch_id == newest.batch_id)
            .order_by(RankingEntry.total_rank, RankingEntry.method)
        ).all()
        return [
            RankingRow(
                method=e.method,
                method_type=e.method_type,
                f1=e.f1,
                f1_rank=e.f1_rank,
                auprc=e.auprc,
                auprc_rank=e.auprc_rank,
                total_rank=e.total_rank,
            )
            for e in entries
        ]
