import numpy as np
import pytest

from app.baselyap import LyapunovEvaluator, WendlandKernel, collocation_base, collocation_fit, fixture_base, grid_nodes
from app.construct import ConstructConfig, construct_prescribed
from app.errors import SectionError
from app.regions import Annulus, Box, Neighborhood, PointSet
from app.serialize import load_stack, save_stack
from app.system import ScalarField
from app.verify import (
    Tolerances,
    VerificationReport,
    fd_orbital_derivative,
    lyapunov_definition_check,
    verify_report,
)

SINK_RECURRENT = Box((-0.2, -0.2), (0.2, 0.2))


def test_add_uses_inclusive_or_strict_tolerance():
    report = VerificationReport()
    assert report.add("inclusive", [0.1, 0.5], 0.5).passed
    assert not report.add("strict", [0.1, 0.5], 0.5, strict=True).passed
    assert not report.passed


def test_empty_checks_pass():
    report = VerificationReport()
    result = report.add("nothing", [], 0.0, strict=True)
    assert result.passed and result.samples == 0 and result.worst == 0.0
    assert report.passed


def test_get_by_name():
    report = VerificationReport()
    report.add("locality", [1e-9], 1e-7)
    assert report.get("locality").worst == 1e-9
    with pytest.raises(KeyError):
        report.get("missing")


def test_machine_lines_and_files(tmp_path):
    report = VerificationReport(provenance="collocation")
    report.add("locality", [1e-9, 2e-8], 1e-7)
    report.add("negativity", [0.5], 0.0, strict=True)
    rows = [r.split() for r in report.lines().splitlines()]
    assert [r[0] for r in rows] == ["locality", "negativity"]
    assert [r[3] for r in rows] == ["pass", "fail"]
    assert float(rows[0][1]) == 2e-8
    assert float(rows[0][2]) == 1e-7

    machine, human = report.write(tmp_path)
    assert machine.read_text(encoding="utf-8") == report.lines()
    text = human.read_text(encoding="utf-8")
    assert text.startswith("verdict: FAIL")
    assert "base provenance: collocation" in text


def test_tolerances_validation():
    with pytest.raises(ValueError):
        Tolerances(samples=0)
    with pytest.raises(ValueError):
        Tolerances(fd_delta=0.0)


def test_flow_difference_matches_the_analytic_rate(linear_sink, flow_cfg):
    base = fixture_base("linear_sink")
    for p in (np.array([1.0, 0.5]), np.array([-2.0, 0.3])):
        assert fd_orbital_derivative(base, linear_sink, p, 1e-3, flow_cfg) == pytest.approx(-float(p @ p), abs=1e-6)


def test_definition_check_separates_the_critical_set(linear_sink):
    base = fixture_base("linear_sink")
    points = np.vstack([[0.0, 0.0], Box.square(2.0).sample(30, seed=4)])
    at_rest = lambda p: float(np.linalg.norm(p)) < 1e-12
    worst, worst_off = lyapunov_definition_check(base, linear_sink, points, at_rest)
    assert worst == 0.0
    assert worst_off < 0.0


class BrokenRight(LyapunovEvaluator):
    """The sink base, except that evaluation breaks down right of the y axis."""

    def __init__(self) -> None:
        self.inner = fixture_base("linear_sink")

    def value(self, p):
        if np.asarray(p)[..., 0].max() > 0:
            raise SectionError("no section here")
        return self.inner.value(p)


def test_evaluation_errors_count_as_failures(linear_sink):
    points = np.array([[-1.0, 0.5], [-0.5, -1.0], [1.0, 0.0]])
    worst, worst_off = lyapunov_definition_check(BrokenRight(), linear_sink, points)
    assert worst == worst_off == np.inf
    worst, _ = lyapunov_definition_check(BrokenRight(), linear_sink, points[:2])
    assert worst < 0.0


@pytest.fixture
def empty_K_tau(linear_sink):
    empty = PointSet.empty(2)
    return construct_prescribed(linear_sink, empty, ScalarField.constant(-1.0), Neighborhood(empty, 0.25))


def test_report_on_the_unmodified_base(empty_K_tau, linear_sink, flow_cfg):
    report = verify_report(
        empty_K_tau,
        linear_sink,
        PointSet.empty(2),
        ScalarField.constant(-1.0),
        tolerances=Tolerances(samples=200),
        recurrent=SINK_RECURRENT,
        cfg=flow_cfg,
    )
    assert report.passed, report.summary()
    assert report.get("prescription").samples == 0
    assert report.get("locality").worst == 0.0
    assert report.provenance == "analytic"
    assert report.get("lyapunov_definition").samples == 200
    fd = report.get("fd_vs_analytic")
    assert fd.passed and fd.samples > 0


def test_report_fails_a_stricter_negativity_margin(empty_K_tau, linear_sink, flow_cfg):
    report = verify_report(
        empty_K_tau,
        linear_sink,
        PointSet.empty(2),
        ScalarField.constant(-1.0),
        tolerances=Tolerances(samples=100, negativity=20.0),
        recurrent=SINK_RECURRENT,
        cfg=flow_cfg,
    )
    assert not report.passed
    assert not report.get("negativity").passed


@pytest.mark.slow
def test_sink_construction_verifies(sink_run):
    report = verify_report(
        sink_run.tau_K,
        sink_run.X,
        sink_run.K,
        sink_run.g,
        tolerances=Tolerances(samples=150),
        recurrent=sink_run.recurrent,
    )
    assert report.passed, report.summary()
    assert report.get("prescription").samples == 150
    # every box-region check samples the full budget
    for name in ("exit_inequality", "step3_gap", "seam_order"):
        assert report.get(name).samples >= 150
    assert report.get("fd_vs_analytic").worst <= 1e-4


@pytest.mark.slow
def test_out_of_range_eps_fails_verification(sink_run, tmp_path):
    path = save_stack(sink_run.tau_K, tmp_path / "stack.txt", ("fixture", "linear_sink"))
    lines = path.read_text(encoding="utf-8").splitlines()
    lines = [
        " ".join(parts[:2] + ["0.6"] + parts[3:]) if (parts := ln.split())[0] == "modification" else ln
        for ln in lines
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    corrupted = load_stack(path, sink_run.tau_K.system, fixture_base("linear_sink"))
    report = verify_report(
        corrupted,
        sink_run.X,
        sink_run.K,
        sink_run.g,
        tolerances=Tolerances(samples=60),
        recurrent=sink_run.recurrent,
    )
    assert not report.get("modification_params").passed
    assert not report.passed


@pytest.mark.slow
def test_collocation_base_end_to_end(linear_sink):
    K = Annulus((0.0, 0.0), 1.0, 1.5)
    g = ScalarField.constant(-1.0)
    nodes = grid_nodes(linear_sink.domain, 0.25, linear_sink, avoid=SINK_RECURRENT, margin=0.1)
    model = collocation_fit(linear_sink, nodes, kernel=WendlandKernel("wendland53", 0.4))
    base = collocation_base(model)
    tau_K = construct_prescribed(
        linear_sink, K, g, Neighborhood(K, 0.25), SINK_RECURRENT, ConstructConfig(section_extent=5.0), base
    )
    report = verify_report(
        tau_K,
        linear_sink,
        K,
        g,
        tolerances=Tolerances(samples=120, prescription=5e-2),
        recurrent=SINK_RECURRENT,
        inflate=0.15,
    )
    assert report.provenance == "collocation"
    assert report.get("prescription").passed, report.summary()
    residual = report.get("base_residual")
    assert residual.samples > 0
    assert "base_residual" in report.lines()
