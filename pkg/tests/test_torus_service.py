import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings, strategies as st

from krflow.config import settings
from krflow.models import ScalarField, TorusGrid
from krflow.services.torus_service import TWO_PI, TorusService, cutoff, torus_distance


@pytest.fixture
def grid():
    return TorusGrid(64)


@pytest.fixture
def torus_service(grid):
    return TorusService(grid)


def theta_green(x, y):
    """log|theta_1(pi z, e^-pi)| - pi y^2 for the square torus (up to a constant)."""
    w = np.pi * (x + 1j * y)
    q = np.exp(-np.pi)
    theta = sum(
        2.0 * (-1) ** k * q ** ((k + 0.5) ** 2) * np.sin((2 * k + 1) * w)
        for k in range(12)
    )
    return np.log(np.abs(theta)) - np.pi * y ** 2


def test_grid_rejects_bad_sizes():
    """Test that grid sizes must be powers of two of at least 64"""
    for n in (32, 100, 0):
        with pytest.raises(ValueError, match="power of two"):
            TorusGrid(n)
    assert TorusGrid(128).h == 1.0 / 128


def test_torus_distance_wraps():
    """Test flat distance uses the shortest lattice translate"""
    assert torus_distance((0.1, 0.1), (0.9, 0.9)) == pytest.approx(np.sqrt(2.0) * 0.2)
    assert torus_distance((0.0, 0.5), (0.75, 0.5)) == pytest.approx(0.25)


def test_cutoff_profile():
    """Test cutoff is 1 inside, 0 outside and monotone in between"""
    r = np.linspace(0.0, 0.4, 401)
    chi, d1, _ = cutoff(r, 0.125, 0.25)
    assert np.all(chi[r <= 0.125] == 1.0)
    assert np.all(chi[r >= 0.25] == 0.0)
    assert np.all(np.diff(chi) <= 0.0)
    assert np.all(d1 <= 0.0)


def test_spectral_laplacian_of_mode(torus_service, grid):
    """Test the spectral Laplacian is exact on a Fourier mode"""
    x, y = grid.coords()
    values = np.cos(TWO_PI * x) * np.sin(TWO_PI * 2 * y)
    result = torus_service.laplacian_values(values)
    np.testing.assert_allclose(result, -TWO_PI * 5 * values, atol=1e-9)


@hypothesis_settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31), st.sampled_from(["spectral", "five-point"]))
def test_poisson_inverts_laplacian(seed, stencil):
    """Test solve_poisson followed by the Laplacian recovers a mean-zero right-hand side"""
    grid = TorusGrid(64)
    service = TorusService(grid)
    rng = np.random.default_rng(seed)
    x, y = grid.coords()
    rhs = np.zeros_like(x)
    for m in range(-3, 4):
        for l in range(-3, 4):
            if m or l:
                rhs += rng.normal() * np.cos(TWO_PI * (m * x + l * y) + rng.uniform(0.0, TWO_PI))
    rhs -= rhs.mean()
    phi = service.solve_poisson(ScalarField(grid, rhs), stencil)
    assert abs(phi.mean()) < 1e-12
    np.testing.assert_allclose(service.laplacian_values(phi.values, stencil), rhs, atol=1e-9)


def test_poisson_rejects_nonzero_mean(torus_service, grid):
    """Test Poisson solve refuses a right-hand side with nonzero mean"""
    with pytest.raises(ValueError, match="zero mean"):
        torus_service.solve_poisson(ScalarField(grid, np.ones((64, 64))))


def test_five_point_symbol_matches_stencil(torus_service, grid):
    """Test the five-point multiplier reproduces the five-point stencil"""
    values = np.random.default_rng(3).normal(size=(64, 64))
    direct = torus_service.laplacian_values(values, "five-point")
    spectral = torus_service.apply_multiplier(values, torus_service.symbol("five-point"))
    np.testing.assert_allclose(direct, spectral - spectral.mean(), atol=1e-8 * np.abs(direct).max())


def test_unknown_stencil(torus_service):
    """Test unknown stencil names are rejected"""
    with pytest.raises(ValueError, match="unknown stencil"):
        torus_service.symbol("nine-point")


def test_gradient_of_mode(torus_service, grid):
    """Test the spectral gradient of sin(2 pi x)"""
    x, _ = grid.coords()
    fx, fy = torus_service.gradient(ScalarField(grid, np.sin(TWO_PI * x)))
    np.testing.assert_allclose(fx, TWO_PI * np.cos(TWO_PI * x), atol=1e-9)
    np.testing.assert_allclose(fy, 0.0, atol=1e-9)


def test_interpolate_smooth_field(torus_service, grid):
    """Test cubic interpolation off the nodes of a smooth field"""
    x, y = grid.coords()
    values = np.cos(TWO_PI * x) * np.sin(TWO_PI * y)
    points = np.random.default_rng(7).uniform(0.0, 1.0, size=(200, 2))
    exact = np.cos(TWO_PI * points[:, 0]) * np.sin(TWO_PI * points[:, 1])
    np.testing.assert_allclose(torus_service.interpolate(values, points), exact, atol=1e-4)


def test_green_function_matches_theta_oracle():
    """Test G_a against log|theta_1| - pi y^2 up to an additive constant"""
    grid = TorusGrid(128)
    green = TorusService(grid).green_function((0.0, 0.0))
    cells = [(38, 25), (64, 64), (32, 0), (-13, 50), (20, -45), (10, 10)]
    points = np.array([[ix / 128.0, iy / 128.0] for iy, ix in cells])
    ours = green(points)
    signed = points - np.rint(points)
    oracle = theta_green(signed[:, 0], signed[:, 1])
    np.testing.assert_allclose(ours - ours[0], oracle - oracle[0], atol=1e-3)


def test_green_function_mean_zero_and_pole():
    """Test G_a has zero mean and is -inf at its node unless cell averaged"""
    grid = TorusGrid(64)
    green = TorusService(grid).green_function((0.5, 0.25))
    raw = green.sample()
    assert raw[16, 32] == -np.inf
    averaged = green.sample(cell_average=True)
    assert np.isfinite(averaged).all()
    assert abs(averaged.mean()) < 5e-3


def test_bilinear_green_function(monkeypatch):
    """Test bilinear interpolation of the smooth part keeps node values and tracks the oracle"""
    grid = TorusGrid(128)
    cubic = TorusService(grid).green_function((0.0, 0.0))
    monkeypatch.setattr(settings, "green_interpolation_order", 1)
    bilinear = TorusService(grid).green_function((0.0, 0.0))
    assert bilinear.order == 1
    nodes = np.array([[ix / 128.0, iy / 128.0] for iy, ix in [(38, 25), (64, 64), (32, 0), (10, 10)]])
    np.testing.assert_allclose(bilinear(nodes), cubic(nodes), atol=1e-9)
    points = np.random.default_rng(5).uniform(0.05, 0.95, size=(40, 2))
    signed = points - np.rint(points)
    oracle = theta_green(signed[:, 0], signed[:, 1])
    ours = bilinear(points)
    np.testing.assert_allclose(ours - ours.mean(), oracle - oracle.mean(), atol=2e-3)


def test_green_circle_means():
    """Test circle means of G_a follow log r + c - pi r^2 / 2 on 4h <= r <= 1/8"""
    grid = TorusGrid(128)
    green = TorusService(grid).green_function((0.5, 0.5))
    radii = np.geomspace(4.0 * grid.h, 0.125, 8)
    theta = TWO_PI * np.arange(256) / 256
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    means = np.array([green(np.array([0.5, 0.5]) + r * circle).mean() for r in radii])
    design = np.stack([np.log(radii), np.ones_like(radii), radii ** 2], axis=1)
    (slope, _, quadratic), *_ = np.linalg.lstsq(design, means, rcond=None)
    assert slope == pytest.approx(1.0, abs=0.01)
    assert quadratic == pytest.approx(-np.pi / 2.0, abs=0.2)


def test_green_function_rejects_outside_pole(torus_service):
    """Test poles must lie in the fundamental square"""
    with pytest.raises(ValueError, match="must lie in"):
        torus_service.green_function((1.2, 0.3))


if __name__ == "__main__":
    pytest.main([__file__])
