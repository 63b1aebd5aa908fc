from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from app.baselyap import fixture_base
from app.construct import ConstructConfig, Jet, PrescribedEvaluator, UnitSpeedBox, construct_prescribed
from app.flow import FlowMapConfig
from app.regions import Annulus, Box, Neighborhood
from app.system import ScalarField, VectorField, fixture_field


class SteepBox:
    """tau(t, q) = offset(q) - slope * t; stands in for a box where tau_dot < -(k + 3)."""

    def __init__(self, slope: float, offset=lambda q: 2.0 + 0.1 * q) -> None:
        self.slope = slope
        self.offset = offset

    def jet(self, t: float, q: float) -> Jet:
        return Jet(float(self.offset(q)) - self.slope * t, -self.slope)

    def level_time(self, q: float, c: float, window=(-1.75, -1.0)) -> float:
        return (float(self.offset(q)) - c) / self.slope


@pytest.fixture
def flow_cfg() -> FlowMapConfig:
    return FlowMapConfig(abs_tol=1e-10, rel_tol=1e-10)


@pytest.fixture
def linear_sink() -> VectorField:
    return fixture_field("linear_sink")


@pytest.fixture
def constant_field() -> VectorField:
    return fixture_field("constant")


@pytest.fixture
def limit_cycle() -> VectorField:
    return fixture_field("limit_cycle", Box.square(2.0))


@pytest.fixture
def unit_box() -> UnitSpeedBox:
    return UnitSpeedBox(lambda q: 2.0 + 0.1 * q)


@pytest.fixture
def steep_box() -> SteepBox:
    return SteepBox(6.0)


@dataclass
class SinkRun:
    tau_K: PrescribedEvaluator
    X: VectorField
    K: Annulus
    g: ScalarField
    U_K: Neighborhood
    recurrent: Box
    cfg: ConstructConfig


# the linear sink's chain recurrent set is the origin; a small box stands in for its cells
SINK_RECURRENT = Box((-0.2, -0.2), (0.2, 0.2))


@pytest.fixture(scope="session")
def sink_run() -> SinkRun:
    X = fixture_field("linear_sink")
    K = Annulus((0.0, 0.0), 1.0, 1.5)
    g = ScalarField.constant(-1.0)
    U_K = Neighborhood(K, 0.25)
    cfg = ConstructConfig(section_extent=5.0)
    tau_K = construct_prescribed(X, K, g, U_K, SINK_RECURRENT, cfg, fixture_base("linear_sink"))
    return SinkRun(tau_K, X, K, g, U_K, SINK_RECURRENT, cfg)


def radial(points) -> np.ndarray:
    return np.linalg.norm(np.asarray(points, dtype=float), axis=-1)
