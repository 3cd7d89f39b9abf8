import numpy as np
import pytest

from krflow.config import settings
from krflow.models import PoleSpec, ScalarField, TorusGrid
from krflow.services.flow_service import FlowService, ladder_times, matched_level
from krflow.services.torus_service import TWO_PI


@pytest.fixture
def grid():
    return TorusGrid(64)


@pytest.fixture
def flow_service(grid):
    return FlowService(grid)


@pytest.fixture
def pole_pair(flow_service):
    plus = flow_service.potentials.build([], "plus")
    minus = flow_service.potentials.build([PoleSpec(x=0.5, y=0.5, nu=0.8, sign="minus")])
    return plus, minus


def test_matched_level_schedule():
    """Test j(k) = 4 + floor(k/2) * 2"""
    assert [matched_level(k) for k in range(6)] == [4, 4, 6, 6, 8, 8]


def test_ladder_times():
    """Test geometric ladder t_end 2^-k in ascending order"""
    assert ladder_times(1.0, 3) == [0.125, 0.25, 0.5, 1.0]


def test_flat_initial_state(flow_service):
    """Test psi+- = 0 starts from phi = u = 0"""
    empty_plus = flow_service.potentials.build([], "plus")
    empty_minus = flow_service.potentials.build([], "minus")
    state = flow_service.init_state(empty_plus, empty_minus, 4)
    assert state.u.sup_norm() < 1e-12
    assert state.phi.sup_norm() < 1e-12


def test_initial_state_solves_poisson(flow_service, pole_pair):
    """Test Delta~ phi_0 = e^{u_0} - 1 with u_0 above the truncation floor"""
    plus, minus = pole_pair
    j = 6
    state = flow_service.init_state(plus, minus, j)
    residual = flow_service.lap(state.phi.values) - (np.exp(state.u.values) - 1.0)
    assert np.abs(residual).max() < 1e-9
    assert state.area() == pytest.approx(1.0, abs=1e-12)
    c = flow_service.potentials.normalization_constant_grid(
        flow_service.potentials.truncate(plus, j).values - flow_service.potentials.truncate(minus, j).values)
    assert state.u.values.max() <= j + c + 0.1
    assert flow_service.coherence(state) < 1e-9


def test_grid_constant_tracks_exact_normalization():
    """Test the truncated grid constant approaches the constant of the singular data"""
    service = FlowService(TorusGrid(128))
    plus = service.potentials.build([], "plus")
    minus = service.potentials.build([PoleSpec(x=0.5, y=0.5, nu=0.8, sign="minus")])
    exact = service.potentials.normalization_constant(plus, minus)
    errors = []
    for j in (2, 6):
        state = service.init_state(plus, minus, j)
        p, m = service.truncated_pair(plus, minus, j)
        errors.append(abs(float(np.mean(state.u.values - (p.values - m.values))) - exact))
    assert errors[1] < 0.05
    assert errors[1] < errors[0]


def test_flat_state_is_fixed(flow_service, grid):
    """Test one backward-Euler step leaves the flat state unchanged"""
    zero = ScalarField(grid, np.zeros((64, 64)))
    state = flow_service.state_from_potential(zero)
    after = flow_service.step(state, 1e-3)
    assert after.t == pytest.approx(1e-3)
    assert after.u.sup_norm() < 1e-12


def test_step_rejects_nonpositive_dt(flow_service, grid):
    """Test time steps must be positive"""
    state = flow_service.state_from_potential(ScalarField(grid, np.zeros((64, 64))))
    with pytest.raises(ValueError, match="positive"):
        flow_service.step(state, 0.0)


def test_state_from_potential_requires_positive_density(flow_service, grid):
    """Test 1 + Laplacian(phi) must stay positive"""
    x, _ = grid.coords()
    phi = ScalarField(grid, 2.0 * np.cos(TWO_PI * x) / TWO_PI)
    with pytest.raises(ValueError, match="positive"):
        flow_service.state_from_potential(phi)


def test_linearized_mode_decay(flow_service, grid):
    """Test a small cos(2 pi x) mode of u decays like e^{-2 pi t}"""
    x, _ = grid.coords()
    epsilon = 1e-3
    phi = ScalarField(grid, -epsilon * np.cos(TWO_PI * x) / TWO_PI)
    trajectory = flow_service.run_from_state(flow_service.state_from_potential(phi), [0.05])
    start, end = trajectory.states
    ratio = np.abs(end.u.values).max() / np.abs(start.u.values).max()
    assert ratio == pytest.approx(np.exp(-TWO_PI * 0.05), rel=0.02)


def test_flow_conserves_area_and_obeys_maximum_principle(flow_service, pole_pair):
    """Test area, maximum principle and monotone mass / L^2 along a fixed-j run"""
    plus, minus = pole_pair
    trajectory = flow_service.run_flow(plus, minus, 4, t_end=0.01, ladder_depth=2)
    assert trajectory.times == pytest.approx([0.0, 0.0025, 0.005, 0.01])
    phi0 = trajectory.states[0].phi.values
    for state in trajectory.states:
        assert abs(state.area() - 1.0) <= settings.area_tolerance
        assert state.phi.values.min() >= phi0.min() - settings.max_principle_slack
        assert state.phi.values.max() <= phi0.max() + settings.max_principle_slack
        assert flow_service.coherence(state) < 1e-9
    masses = [row.mass for row in trajectory.rows]
    lp = [row.lp_integral for row in trajectory.rows]
    assert all(b >= a - settings.monotonicity_slack for a, b in zip(masses, masses[1:]))
    assert all(b <= a * (1.0 + settings.monotonicity_slack) for a, b in zip(lp, lp[1:]))


def test_diagnostic_rows(flow_service, pole_pair):
    """Test rows carry time concavity only at interior ladder states"""
    plus, minus = pole_pair
    trajectory = flow_service.run_flow(plus, minus, 4, t_end=0.01, ladder_depth=2)
    assert len(trajectory.rows) == len(trajectory.states)
    assert trajectory.rows[0].time_concavity is None
    assert trajectory.rows[-1].time_concavity is None
    assert all(row.time_concavity is not None for row in trajectory.rows[1:-1])
    assert all(abs(row.area_error) < 1e-8 for row in trajectory.rows)


def test_matched_ladder_levels(flow_service, pole_pair):
    """Test matched ladder states carry j(k) and exclude t = 0"""
    plus, minus = pole_pair
    trajectory = flow_service.run_matched_ladder(plus, minus, t_end=0.01, depth=2)
    assert trajectory.times == pytest.approx([0.0025, 0.005, 0.01])
    assert [state.level for state in trajectory.states] == [6, 4, 4]
    assert len(trajectory.rows) == 3


def test_state_at_unknown_time(flow_service, pole_pair):
    """Test looking up a time off the ladder lists the available times"""
    plus, minus = pole_pair
    trajectory = flow_service.run_flow(plus, minus, 4, t_end=0.01, ladder_depth=1)
    assert trajectory.state_at(0.005).t == 0.005
    with pytest.raises(ValueError, match="available"):
        trajectory.state_at(0.003)


def test_stiff_step_is_reported(flow_service, pole_pair, monkeypatch):
    """Test Newton failure with no halvings left raises a stiff-step error"""
    plus, minus = pole_pair
    state = flow_service.init_state(plus, minus, 4)
    monkeypatch.setattr(settings, "newton_max_iter", 1)
    monkeypatch.setattr(settings, "max_halvings", 0)
    with pytest.raises(RuntimeError, match="stiff step"):
        flow_service.step(state, 0.01)


def test_j_sweep_returns_every_level(flow_service, pole_pair):
    """Test the sweep runs one trajectory per level"""
    plus, minus = pole_pair
    sweep = flow_service.j_sweep(plus, minus, [4, 6], t_end=0.01, depth=1)
    assert sorted(sweep) == [4, 6]
    assert all(trajectory.states[-1].t == 0.01 for trajectory in sweep.values())


if __name__ == "__main__":
    pytest.main([__file__])
