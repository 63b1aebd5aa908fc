from __future__ import annotations

from datetime import datetime
from typing import Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from app.models import CheckRecord, RunRecord
from app.verify import VerificationReport


def record_run(
    session: Session,
    *,
    command: str,
    config_digest: str,
    seed: int,
    exit_code: int,
    message: Optional[str] = None,
    summary: Optional[dict] = None,
    started_at: Optional[datetime] = None,
) -> RunRecord:
    """
    Store one CLI run. `summary` may carry n_boxes, scale, components and
    recurrent_cells; anything else in it is ignored.
    """
    summary = summary or {}
    run = RunRecord(
        command=command,
        started_at=started_at or datetime.utcnow(),
        config_digest=config_digest,
        seed=seed,
        status="ok" if exit_code == 0 else "failed",
        exit_code=exit_code,
        message=(message or "")[:500] or None,
        n_boxes=summary.get("n_boxes"),
        scale=summary.get("scale"),
        components=summary.get("components"),
        recurrent_cells=summary.get("recurrent_cells"),
    )
    session.add(run)
    session.commit()
    session.refresh(run)
    return run


def record_checks(session: Session, run: RunRecord, report: VerificationReport) -> list[CheckRecord]:
    rows = [
        CheckRecord(
            name=c.name,
            samples=c.samples,
            worst=c.worst,
            tolerance=c.tolerance,
            passed=c.passed,
        )
        for c in report.checks
    ]
    run.checks.extend(rows)
    session.commit()
    return rows


def latest_runs(session: Session, limit: int = 10, command: Optional[str] = None) -> list[RunRecord]:
    stmt = select(RunRecord).order_by(RunRecord.id.desc()).limit(limit)
    if command is not None:
        stmt = stmt.where(RunRecord.command == command)
    return list(session.scalars(stmt))
