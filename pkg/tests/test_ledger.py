import pytest
from sqlalchemy import create_engine, func, select

from app.db import make_session_factory
from app.init_db import init_db, main as init_main
from app.ledger import latest_runs, record_checks, record_run
from app.models import CheckRecord
from app.verify import VerificationReport


@pytest.fixture
def session():
    engine = create_engine("sqlite://")
    init_db(engine)
    Session = make_session_factory(engine)
    with Session() as s:
        yield s


def _report(*passes):
    report = VerificationReport()
    for i, ok in enumerate(passes):
        report.add(f"check{i}", [0.0 if ok else 1.0], 0.5)
    return report


def test_record_run_sets_status_from_exit_code(session):
    ok = record_run(session, command="construct", config_digest="a" * 64, seed=1, exit_code=0,
                    summary={"n_boxes": 2, "scale": 12.5, "ignored": 1})
    bad = record_run(session, command="verify", config_digest="b" * 64, seed=1, exit_code=3, message="x" * 600)
    assert (ok.status, ok.n_boxes, ok.scale) == ("ok", 2, 12.5)
    assert ok.verdict is None
    assert bad.status == "failed"
    assert len(bad.message) == 500


def test_checks_give_the_verdict(session):
    run = record_run(session, command="verify", config_digest="c" * 64, seed=0, exit_code=1)
    rows = record_checks(session, run, _report(True, False))
    assert [r.name for r in rows] == ["check0", "check1"]
    assert run.verdict is False
    other = record_run(session, command="verify", config_digest="c" * 64, seed=0, exit_code=0)
    record_checks(session, other, _report(True, True))
    assert other.verdict is True
    assert session.scalar(select(func.count()).select_from(CheckRecord)) == 4


def test_latest_runs_filters_and_orders(session):
    for command in ("chainrec", "construct", "verify", "construct"):
        record_run(session, command=command, config_digest="d" * 64, seed=0, exit_code=0)
    assert [r.command for r in latest_runs(session, limit=2)] == ["construct", "verify"]
    constructs = latest_runs(session, command="construct")
    assert len(constructs) == 2
    assert constructs[0].id > constructs[1].id


def test_init_db_script_creates_the_catalogue(tmp_path, capsys):
    assert init_main([str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "runs.db").exists()
    assert "Run catalogue ready" in capsys.readouterr().out
