import numpy as np
import pytest

from app.cli import EXIT_CONSTRUCTION, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED, main
from app.db import make_engine, make_session_factory
from app.ledger import latest_runs

SINK_EMPTY_K = """
[system]
name = linear_sink

[chain]
h = 0.25

[K]
kind = empty

[export]
grid = 5

[tolerances]
samples = 100
"""

SINK_CENTER_K = """
[system]
name = linear_sink

[chain]
h = 0.25

[K]
kind = box
lo = -0.5, -0.5
hi = 0.5, 0.5
"""

CONSTANT_FLOW = """
[system]
name = constant

[chain]
h = 0.25
"""

SINK_ANNULUS = """
[system]
name = linear_sink

[chain]
h = 0.1

[K]
kind = annulus
center = 0.0, 0.0
r_lo = 1.0
r_hi = 1.5

[cover]
section_extent = 5.0

[export]
grid = 11

[tolerances]
samples = 150
"""


def _config(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _run(command, config, out, *extra):
    return main([command, "--config", str(config), "--out", str(out), *extra])


def _runs(out):
    Session = make_session_factory(make_engine(out))
    with Session() as session:
        return [(r.command, r.status, r.exit_code, r.n_boxes, r.components, r.verdict) for r in latest_runs(session)]


def test_missing_config_is_a_usage_error(tmp_path):
    out = tmp_path / "out"
    assert _run("chainrec", tmp_path / "nope.ini", out) == EXIT_USAGE
    assert _runs(out) == [("chainrec", "failed", EXIT_USAGE, None, None, None)]


def test_malformed_config_is_a_usage_error(tmp_path):
    config = _config(tmp_path, "[chain]\nh = -1\n")
    assert _run("construct", config, tmp_path / "out") == EXIT_USAGE


def test_constant_flow_has_no_recurrent_set(tmp_path):
    out = tmp_path / "out"
    assert _run("chainrec", _config(tmp_path, CONSTANT_FLOW), out) == EXIT_OK
    summary = (out / "chainrec_summary.txt").read_text(encoding="utf-8").splitlines()
    assert summary[0] == "components 0"
    assert summary[1] == "recurrent_cells 0"
    assert (out / "cells.txt").read_text(encoding="utf-8").strip() == ""
    assert (out / "run.log").exists()
    assert _runs(out) == [("chainrec", "ok", EXIT_OK, None, 0, None)]


def test_empty_K_construct_exports_the_base(tmp_path):
    out = tmp_path / "out"
    assert _run("construct", _config(tmp_path, SINK_EMPTY_K), out) == EXIT_OK
    construction = (out / "construction.txt").read_text(encoding="utf-8").splitlines()
    assert construction[:3] == ["N 0", "C 1.0", "base fixture linear_sink"]
    assert (out / "stack.txt").exists()

    grid = np.loadtxt(out / "grid.txt")
    assert grid.shape == (25, 4)
    r2 = grid[:, 0] ** 2 + grid[:, 1] ** 2
    np.testing.assert_allclose(grid[:, 2], r2 / 2)
    np.testing.assert_allclose(grid[:, 3], -r2, atol=1e-12)
    assert _runs(out)[0][:4] == ("construct", "ok", EXIT_OK, 0)


def test_construct_is_deterministic(tmp_path):
    config = _config(tmp_path, SINK_EMPTY_K)
    assert _run("construct", config, tmp_path / "a") == EXIT_OK
    assert _run("construct", config, tmp_path / "b", "--threads", "2") == EXIT_OK
    for name in ("grid.txt", "stack.txt", "construction.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_grid_and_verify_reuse_the_stack(tmp_path):
    out = tmp_path / "out"
    config = _config(tmp_path, SINK_EMPTY_K)
    assert _run("construct", config, out) == EXIT_OK
    first = (out / "grid.txt").read_bytes()
    assert _run("export-grid", config, out) == EXIT_OK
    assert (out / "grid.txt").read_bytes() == first

    assert _run("verify", config, out) == EXIT_OK
    report = (out / "report.txt").read_bytes()
    assert b"lyapunov_definition" in report
    assert _run("verify", config, out) == EXIT_OK
    assert (out / "report.txt").read_bytes() == report
    assert (out / "report_summary.txt").read_text(encoding="utf-8").startswith("verdict: PASS")
    command, status, code, _, _, verdict = _runs(out)[0]
    assert (command, status, code, verdict) == ("verify", "ok", EXIT_OK, True)


def test_verify_without_a_stack_is_a_usage_error(tmp_path):
    out = tmp_path / "out"
    assert _run("verify", _config(tmp_path, SINK_EMPTY_K), out) == EXIT_USAGE
    assert _run("export-grid", _config(tmp_path, SINK_EMPTY_K), out, "--stack", str(tmp_path / "x.txt")) == EXIT_USAGE


def test_K_on_the_recurrent_set_is_refused(tmp_path):
    out = tmp_path / "out"
    assert _run("construct", _config(tmp_path, SINK_CENTER_K), out) == EXIT_CONSTRUCTION
    assert not (out / "stack.txt").exists()
    assert _runs(out)[0][:3] == ("construct", "failed", EXIT_CONSTRUCTION)


def test_bad_arguments_exit_through_argparse(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["construct"])
    assert info.value.code == 2


@pytest.mark.slow
def test_sink_construct_and_verify(tmp_path):
    out = tmp_path / "out"
    config = _config(tmp_path, SINK_ANNULUS)
    assert _run("construct", config, out) == EXIT_OK
    construction = (out / "construction.txt").read_text(encoding="utf-8").splitlines()
    assert construction[0] == "N 1"
    assert construction[-1].endswith("passed")
    assert _run("verify", config, out) == EXIT_OK

    stack = out / "stack.txt"
    lines = stack.read_text(encoding="utf-8").splitlines()
    lines = [
        " ".join(parts[:2] + ["0.6"] + parts[3:]) if (parts := ln.split())[0] == "modification" else ln
        for ln in lines
    ]
    stack.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert _run("verify", config, out) == EXIT_VERIFY_FAILED
    assert "modification_params" in (out / "report.txt").read_text(encoding="utf-8")
