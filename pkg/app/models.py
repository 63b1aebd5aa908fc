from __future__ import annotations

from datetime import datetime
from typing import List, Optional

from sqlalchemy import Boolean, CheckConstraint, DateTime, Float, ForeignKey, Integer, String
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    """One CLI invocation against an output directory."""

    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    command: Mapped[str] = mapped_column(String(20), nullable=False)
    started_at: Mapped[datetime] = mapped_column(DateTime, nullable=False, default=datetime.utcnow)
    config_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    seed: Mapped[int] = mapped_column(Integer, nullable=False, default=0)

    # ok | failed
    status: Mapped[str] = mapped_column(String(10), nullable=False)
    exit_code: Mapped[int] = mapped_column(Integer, nullable=False, default=0)
    message: Mapped[Optional[str]] = mapped_column(String(500))

    # summary numbers, whichever the command produced
    n_boxes: Mapped[Optional[int]] = mapped_column(Integer)
    scale: Mapped[Optional[float]] = mapped_column(Float)
    components: Mapped[Optional[int]] = mapped_column(Integer)
    recurrent_cells: Mapped[Optional[int]] = mapped_column(Integer)

    __table_args__ = (
        CheckConstraint("command IN ('chainrec','construct','verify','export-grid')", name="ck_runs_command"),
        CheckConstraint("status IN ('ok','failed')", name="ck_runs_status"),
    )

    checks: Mapped[List["CheckRecord"]] = relationship(
        back_populates="run",
        cascade="all, delete-orphan",
    )

    @property
    def verdict(self) -> Optional[bool]:
        if not self.checks:
            return None
        return all(c.passed for c in self.checks)


class CheckRecord(Base):
    __tablename__ = "checks"

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id"), nullable=False)
    name: Mapped[str] = mapped_column(String(40), nullable=False)
    samples: Mapped[int] = mapped_column(Integer, nullable=False)
    worst: Mapped[float] = mapped_column(Float, nullable=False)
    tolerance: Mapped[float] = mapped_column(Float, nullable=False)
    passed: Mapped[bool] = mapped_column(Boolean, nullable=False)

    run: Mapped["RunRecord"] = relationship(back_populates="checks")
