import numpy as np
import pytest

from app.baselyap import fixture_base
from app.construct import (
    MU_MINUS,
    BoxFunction,
    BoxModification,
    ConstructConfig,
    CoverPatch,
    Jet,
    ParamInterval,
    _free_level,
    check_dimension,
    choose_cover,
    construct_prescribed,
    scale_constant,
    scale_from_margin,
    step3,
    step4,
)
from app.errors import AdmissionError, BracketError
from app.regions import Annulus, Box, Neighborhood, PointSet
from app.system import ScalarField, VectorField, fixture_field, prepare_system
from app.verify import Tolerances, fd_orbital_derivative, scale_violations, verify_report

K_INDEX = 1
TOP = K_INDEX + 1.0


def _modification(coords, cover=(), eps=0.2):
    return BoxModification(coords, K_INDEX, eps, ParamInterval(-0.5, 0.5), ParamInterval(-1.0, 1.0), tuple(cover))


def _patch(coords, q0=0.0, time=-1.5, radius=0.5):
    return CoverPatch(q0, time, radius, coords.jet(time, q0).value)


QS = np.linspace(-0.45, 0.45, 7)


# ------------------------------------------------------------ step suite

@pytest.mark.parametrize("box", ["unit_box", "steep_box"])
def test_step1_leaves_tau_alone_before_the_ramp(box, request):
    coords = request.getfixturevalue(box)
    mod = _modification(coords)
    for q in QS:
        for t in np.linspace(-3.0, -1.5, 7):
            assert mod.tau1(t, q) == coords.jet(t, q)


@pytest.mark.parametrize("box", ["unit_box", "steep_box"])
def test_step1_has_unit_speed_after_the_ramp(box, request):
    coords = request.getfixturevalue(box)
    mod = _modification(coords)
    for q in QS:
        for t in np.linspace(-1.25, TOP, 13):
            assert mod.tau1(t, q).slope == pytest.approx(-1.0, abs=1e-6)


@pytest.mark.parametrize("box", ["unit_box", "steep_box"])
def test_step1_exit_identity(box, request):
    coords = request.getfixturevalue(box)
    mod = _modification(coords)
    for q in QS:
        expected = coords.jet(-1.0, q).value - K_INDEX - 2.5
        assert mod.tau1(TOP, q).value == pytest.approx(expected, abs=1e-9)


def test_step1_slope_is_the_t_derivative(steep_box):
    mod = _modification(steep_box)
    h = 1e-6
    for t in (-1.45, -1.375, -1.3):
        fd = (mod.tau1(t + h, 0.1).value - mod.tau1(t - h, 0.1).value) / (2 * h)
        assert mod.tau1(t, 0.1).slope == pytest.approx(fd, abs=1e-6)


@pytest.mark.parametrize("with_cover", [False, True])
def test_step2_exit_inequality(steep_box, with_cover):
    cover = [_patch(steep_box)] if with_cover else []
    mod = _modification(steep_box, cover)
    for q in QS:
        assert mod.tau2(TOP, q).value >= mod.A(q) - K_INDEX - 2.75


@pytest.mark.parametrize("with_cover", [False, True])
def test_step2_stays_above_tau_near_the_exit(steep_box, with_cover):
    cover = [_patch(steep_box)] if with_cover else []
    mod = _modification(steep_box, cover)
    for q in QS:
        for t in np.linspace(TOP - 2 * mod.eps, TOP, 9):
            assert steep_box.jet(t, q).value < mod.tau2(t, q).value


def test_step2_follows_tau_then_unit_speed_inside_a_patch(unit_box):
    mod = _modification(unit_box, [_patch(unit_box)])
    assert mod.nu1(0.0) == 1.0
    assert mod.weights(0.0) == pytest.approx([1.0])
    for t in np.linspace(-1.25, TOP, 9):
        assert mod.tau2(t, 0.0).slope == pytest.approx(-1.0, abs=1e-9)


def test_step3_restores_tau_at_the_exit(steep_box):
    mod = _modification(steep_box, [_patch(steep_box)])
    for q in QS:
        for t in np.linspace(TOP - mod.eps, TOP, 5):
            assert mod.tau3(t, q) == steep_box.jet(t, q)


def test_step4_restores_tau_outside_the_inner_section(steep_box):
    mod = _modification(steep_box, [_patch(steep_box)])
    assert mod.nu2_margin == pytest.approx(0.5)
    for q in (-0.95, -0.9, 0.9, 0.95):
        assert mod.nu2(q) == 0.0
        for t in np.linspace(-1.75, TOP, 6):
            assert mod.tau4(t, q) == steep_box.jet(t, q)
    for t in np.linspace(-1.75, TOP, 6):
        assert mod.tau4(t, 0.2) == mod.tau3(t, 0.2)


def test_modified_slope_is_the_t_derivative(steep_box):
    mod = _modification(steep_box, [_patch(steep_box)])
    h = 1e-6
    for t in (-1.4, -1.3, -0.5, 0.7, 1.65, 1.75, 1.9):
        for q in (0.1, 0.7):
            fd = (mod.jet(t + h, q).value - mod.jet(t - h, q).value) / (2 * h)
            assert mod.jet(t, q).slope == pytest.approx(fd, abs=1e-5)


def test_closed_sections_skip_the_q_blend(steep_box):
    ring = ParamInterval(0.0, 2 * np.pi, closed=True)
    mod = BoxModification(steep_box, K_INDEX, 0.2, ring, ring)
    assert mod.nu2_margin is None
    assert mod.nu2(10.0) == 1.0


def test_step_helpers_at_the_blend_ends():
    tau, other = Jet(3.0, -2.0), Jet(1.0, -1.0)
    assert step4(other, tau, 0.0) == tau
    assert step4(other, tau, 1.0) == other
    mu = MU_MINUS
    assert step3(other, tau, -1.0, mu) == tau


def test_invariant_violations_are_reported(unit_box):
    bad_time = CoverPatch(0.0, -1.0, 0.3, 1.0)
    outside = CoverPatch(1.5, -1.5, 0.3, 1.0)
    mod = _modification(unit_box, [bad_time, outside], eps=0.6)
    problems = mod.invariant_violations()
    assert len(problems) == 3
    assert _modification(unit_box, [_patch(unit_box)]).invariant_violations() == []


def test_modification_parameters_are_validated(unit_box):
    with pytest.raises(ValueError):
        BoxModification(unit_box, 0, 0.2, ParamInterval(-0.5, 0.5), ParamInterval(-1.0, 1.0))
    with pytest.raises(ValueError):
        _modification(unit_box, eps=0.0)
    with pytest.raises(ValueError):
        BoxModification(unit_box, 1, 0.2, ParamInterval(-1.0, 1.0), ParamInterval(-1.0, 1.0))


def test_unit_speed_level_time(unit_box):
    assert unit_box.level_time(0.0, 3.5) == pytest.approx(-1.5)
    with pytest.raises(BracketError):
        unit_box.level_time(0.0, 2.0)


class _Curved(BoxFunction):
    def jet(self, t, q):
        return Jet(1.0 - t - 0.1 * t * t, -1.0 - 0.2 * t)


def test_generic_level_time_brackets_the_root():
    box = _Curved()
    u = box.level_time(0.0, 2.1)
    assert box.jet(u, 0.0).value == pytest.approx(2.1, abs=1e-12)
    assert -1.75 <= u <= -1.0
    with pytest.raises(BracketError):
        box.level_time(0.0, 10.0)


def test_param_interval_on_a_circle():
    ring = ParamInterval(0.0, 2.0, closed=True)
    assert ring.wrap(2.5) == pytest.approx(0.5)
    assert ring.param_distance(0.1, 1.9) == pytest.approx(0.2)
    assert ring.dist_outside(7.0) == 0.0
    line = ParamInterval(0.0, 2.0)
    assert line.dist_outside(2.5) == pytest.approx(0.5)
    assert not line.contains_param(2.0)
    assert line.contains_param(2.0, closure=True)


# ------------------------------------------------------- cover helpers

def test_free_level_moves_off_taken_levels():
    assert _free_level(0.7, [0.5], 1e-3) == 0.7
    moved = _free_level(0.5, [0.5], 1e-3)
    assert abs(moved - 0.5) == pytest.approx(1e-3)
    moved = _free_level(0.5, [0.5, 0.501, 0.499], 1e-3)
    assert min(abs(moved - l) for l in (0.5, 0.501, 0.499)) >= 1e-3 * (1 - 1e-9)


def test_scale_from_margin():
    assert scale_from_margin(2, 0.5) == pytest.approx(11.0)
    with pytest.raises(AdmissionError):
        scale_from_margin(1, 0.0)


def test_dimension_gate():
    check_dimension(2)
    with pytest.raises(AdmissionError):
        check_dimension(3)
    with pytest.raises(AdmissionError):
        check_dimension(1)


def test_construct_config_validation():
    with pytest.raises(ValueError):
        ConstructConfig(cover_time=1.5)
    with pytest.raises(ValueError):
        ConstructConfig(eps_start=0.5)
    with pytest.raises(ValueError):
        ConstructConfig(safety=1.0)


# ------------------------------------------------------------ pipeline

def test_empty_K_leaves_the_scaled_base(linear_sink):
    empty = PointSet.empty(2)
    tau_K = construct_prescribed(linear_sink, empty, ScalarField.constant(-1.0), Neighborhood(empty, 0.25))
    assert tau_K.plan.N == 0
    assert tau_K.plan.scale == 1.0
    assert tau_K.depth == 0
    base = fixture_base("linear_sink")
    for p in Box.square(3.0).sample(20, seed=0):
        assert tau_K.value(p) == base.value(p)
        assert tau_K.rate(p) == pytest.approx(-float(p @ p), rel=1e-10)


def test_K_touching_the_recurrent_set_is_refused(linear_sink):
    K = Box((-0.5, -0.5), (0.5, 0.5))
    recurrent = Box((-0.2, -0.2), (0.2, 0.2))
    with pytest.raises(AdmissionError):
        construct_prescribed(linear_sink, K, ScalarField.constant(-1.0), Neighborhood(K, 0.25), recurrent)


def test_three_dimensional_systems_are_refused():
    X = VectorField("sink3", lambda p: -p, Box.square(1.0, dim=3))
    K = PointSet.empty(3)
    with pytest.raises(AdmissionError):
        construct_prescribed(X, K, ScalarField.constant(-1.0), Neighborhood(K, 0.1))


@pytest.mark.slow
def test_sink_cover_is_a_single_closed_box(sink_run):
    plan = sink_run.tau_K.plan
    assert plan.N == 1
    assert plan.boxes[0].outer.closed
    assert plan.boxes[0].half_width == 2.0
    assert plan.scale > 0
    assert len(sink_run.tau_K.modifications) == 1
    mod = sink_run.tau_K.modifications[0]
    assert 0 < mod.eps < 0.5
    assert mod.invariant_violations() == []


@pytest.mark.slow
def test_sink_derivative_is_prescribed_on_K(sink_run):
    for p in sink_run.K.sample(40, seed=11):
        rate = fd_orbital_derivative(sink_run.tau_K, sink_run.X, p, 1e-4)
        assert rate == pytest.approx(-1.0, abs=1e-4)


@pytest.mark.slow
def test_sink_function_is_local_and_negative(sink_run):
    tau_K = sink_run.tau_K
    C = tau_K.plan.scale
    base = fixture_base("linear_sink")
    for p in (np.array([0.1, 0.0]), np.array([0.0, -0.12]), np.array([0.08, 0.08])):
        assert not tau_K.plan.outer_contains(p)
        assert tau_K.value(p) == pytest.approx(C * base.value(p), abs=1e-7)
    for p in Annulus((0.0, 0.0), 0.3, 2.5).sample(40, seed=12):
        assert tau_K.rate(p) < -1e-3


def test_constant_flow_square_needs_one_box(constant_field):
    K = Box((0.0, 0.0), (1.0, 1.0))
    plan = choose_cover(K, fixture_base("constant"), None, constant_field)
    assert plan.N == 1
    assert not plan.boxes[0].outer.closed
    for p in K.sample(50, seed=3):
        assert plan.inner_covers(p)


@pytest.mark.slow
def test_sink_annulus_with_open_sections_stacks_several_boxes(linear_sink):
    K = Annulus((0.0, 0.0), 1.0, 1.5)
    g = ScalarField.constant(-1.0)
    recurrent = Box((-0.2, -0.2), (0.2, 0.2))
    tau_K = construct_prescribed(
        linear_sink, K, g, Neighborhood(K, 0.25), recurrent, ConstructConfig(section_extent=2.5), fixture_base("linear_sink")
    )
    plan = tau_K.plan
    assert 2 <= plan.N <= 4
    assert not any(box.outer.closed for box in plan.boxes)
    assert all(a > b for a, b in zip(plan.levels, plan.levels[1:]))
    assert [mod.k for mod in tau_K.modifications] == list(range(1, plan.N + 1))
    for mod in tau_K.modifications:
        assert mod.invariant_violations() == []
    report = verify_report(tau_K, linear_sink, K, g, tolerances=Tolerances(samples=120), recurrent=recurrent)
    for name in ("prescription", "locality", "negativity", "modification_params", "exit_inequality", "step3_gap"):
        assert report.get(name).passed, report.summary()


@pytest.mark.slow
def test_sink_with_a_radial_target(linear_sink):
    K = Annulus((0.0, 0.0), 1.0, 1.5)
    g = ScalarField("radial", lambda p: -(1.0 + np.sum(np.asarray(p) ** 2, axis=-1)) / 2.0)
    tau_K = construct_prescribed(
        linear_sink, K, g, Neighborhood(K, 0.25), Box((-0.2, -0.2), (0.2, 0.2)), ConstructConfig(section_extent=5.0)
    )
    g_max = max(abs(g(p)) for p in K.sample(200, seed=9))
    for p in K.sample(60, seed=13):
        rate = fd_orbital_derivative(tau_K, linear_sink, p, 1e-4)
        assert abs(rate - g(p)) <= 1e-4 * g_max
        assert tau_K.rate(p) == pytest.approx(g(p), rel=1e-6)


@pytest.mark.slow
def test_limit_cycle_scale_holds_on_dense_box_samples():
    X = fixture_field("limit_cycle", Box.square(2.0))
    K = Annulus((0.0, 0.0), 0.4, 0.6)
    system = prepare_system(X, ScalarField.constant(-1.0), K, Neighborhood(K, 0.1))
    cfg = ConstructConfig(section_extent=5.0)
    plan = choose_cover(K, fixture_base("limit_cycle"), None, system.working, cfg)
    C = scale_constant(plan, system.working, cfg)
    assert C == plan.scale > 0
    violations = scale_violations(plan, system.working, n=10_000)
    assert len(violations) == 10_000 * plan.N
    assert max(violations) < 0
