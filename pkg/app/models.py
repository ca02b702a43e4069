from datetime import datetime

from sqlalchemy import JSON, DateTime, Float, ForeignKey, Integer, String
from sqlalchemy.orm import Mapped, mapped_column, relationship

from .database import Base


class TimestampMixin:
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    updated_at: Mapped[datetime] = mapped_column(
        DateTime, default=datetime.utcnow, onupdate=datetime.utcnow
    )


class BenchmarkRun(Base, TimestampMixin):
    """One method's grid-search outcome; aggregates are fold means."""

    __tablename__ = "benchmark_runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    method: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    method_type: Mapped[str] = mapped_column(String(64), nullable=False, default="")
    best_f1: Mapped[float] = mapped_column(Float, nullable=False)
    auprc: Mapped[float] = mapped_column(Float, nullable=False)
    configs_evaluated: Mapped[int] = mapped_column(Integer, default=0)
    configs_total: Mapped[int] = mapped_column(Integer, default=0)
    seed: Mapped[int] = mapped_column(Integer, default=0)
    warnings: Mapped[list] = mapped_column(JSON, default=list)

    folds: Mapped[list["FoldOutcomeRecord"]] = relationship(
        back_populates="run", cascade="all, delete-orphan", order_by="FoldOutcomeRecord.fold"
    )


class FoldOutcomeRecord(Base, TimestampMixin):
    __tablename__ = "fold_outcomes"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("benchmark_runs.id"), nullable=False, index=True)
    fold: Mapped[int] = mapped_column(Integer, nullable=False)
    selected_config: Mapped[dict] = mapped_column(JSON, default=dict)
    selection_f1: Mapped[float] = mapped_column(Float, nullable=False)
    best_f1: Mapped[float] = mapped_column(Float, nullable=False)
    auprc: Mapped[float] = mapped_column(Float, nullable=False)

    run: Mapped[BenchmarkRun] = relationship(back_populates="folds")


class RankingEntry(Base, TimestampMixin):
    """A ranking table row. Rows saved together share a batch id."""

    __tablename__ = "ranking_entries"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    batch_id: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    method: Mapped[str] = mapped_column(String(64), nullable=False)
    method_type: Mapped[str] = mapped_column(String(64), default="")
    f1: Mapped[float] = mapped_column(Float, nullable=False)
    f1_rank: Mapped[int] = mapped_column(Integer, nullable=False)
    auprc: Mapped[float] = mapped_column(Float, nullable=False)
    auprc_rank: Mapped[int] = mapped_column(Integer, nullable=False)
    total_rank: Mapped[int] = mapped_column(Integer, nullable=False)
