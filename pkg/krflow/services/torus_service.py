#!/usr/bin/env python3
"""
Torus Service
Flat-torus geometry: spectral and five-point Laplacians, Poisson solves,
off-grid interpolation and the periodic Green function split.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal, Tuple

import numpy as np
from scipy import fft, ndimage
from scipy.integrate import quad
from scipy.special import expit

from krflow.config import settings
from krflow.models import Point, ScalarField, TorusGrid

Stencil = Literal["spectral", "five-point"]

TWO_PI = 2.0 * np.pi


def min_image(delta: np.ndarray) -> np.ndarray:
    """Shortest representative of a displacement modulo the lattice."""
    return delta - np.rint(delta)


def torus_distance(a, b) -> np.ndarray:
    """Flat torus distance d_S, vectorized over trailing (..., 2) points."""
    delta = min_image(np.asarray(b, dtype=float) - np.asarray(a, dtype=float))
    return np.hypot(delta[..., 0], delta[..., 1])


def cutoff(r: np.ndarray, inner: float, outer: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smooth radial cutoff chi (1 inside `inner`, 0 outside `outer`) with chi' and chi''."""
    shape = np.shape(r)
    r = np.atleast_1d(np.asarray(r, dtype=float)).ravel()
    width = outer - inner
    x = (r - inner) / width
    chi = np.where(x <= 0.0, 1.0, 0.0)
    d1 = np.zeros_like(r)
    d2 = np.zeros_like(r)
    ramp = (x > 0.0) & (x < 1.0)
    if np.any(ramp):
        xr = x[ramp]
        q = 1.0 / (1.0 - xr) - 1.0 / xr
        dq = 1.0 / (1.0 - xr) ** 2 + 1.0 / xr ** 2
        ddq = 2.0 / (1.0 - xr) ** 3 - 2.0 / xr ** 3
        sigma = expit(q)
        s1 = sigma * (1.0 - sigma)
        chi[ramp] = 1.0 - sigma
        d1[ramp] = -s1 * dq / width
        d2[ramp] = -(s1 * (1.0 - 2.0 * sigma) * dq ** 2 + s1 * ddq) / width ** 2
    return chi.reshape(shape), d1.reshape(shape), d2.reshape(shape)


def spline_eval(coefficients: np.ndarray, points, order: int = 3) -> np.ndarray:
    """Evaluate periodic spline coefficients (indexed [iy, ix]) at (..., 2) points.

    order 1 is bilinear and takes the node values themselves as coefficients.
    """
    points = np.asarray(points, dtype=float)
    n = coefficients.shape[0]
    coords = np.stack([points[..., 1] * n, points[..., 0] * n]).reshape(2, -1)
    values = ndimage.map_coordinates(coefficients, coords, order=order, mode="grid-wrap", prefilter=False)
    return values.reshape(points.shape[:-1])


@lru_cache(maxsize=None)
def cell_log_mean() -> float:
    """Mean of log|w| over the unit square centred at the origin."""
    def wedge(theta):
        radius = 0.5 / np.cos(theta)
        return radius ** 2 / 2.0 * np.log(radius) - radius ** 2 / 4.0
    value, _ = quad(wedge, 0.0, np.pi / 4.0, epsabs=1e-14, epsrel=1e-13)
    return 8.0 * value


@lru_cache(maxsize=None)
def cell_power_mean(exponent: float) -> float:
    """Mean of |w|**exponent over the unit square centred at the origin (exponent > -2)."""
    def wedge(theta):
        return (0.5 / np.cos(theta)) ** (exponent + 2.0) / (exponent + 2.0)
    value, _ = quad(wedge, 0.0, np.pi / 4.0, epsabs=1e-14, epsrel=1e-13)
    return 8.0 * value


@dataclass(frozen=True)
class GreenFunction:
    """Mean-zero G_a with dd^c G_a = delta_a - omega: chi(r) log r plus a periodic correction."""
    center: Point
    grid: TorusGrid
    correction: np.ndarray = field(repr=False)      # S for a source at the origin, on nodes
    coefficients: np.ndarray = field(repr=False)    # spline coefficients of S
    inner: float = 0.125
    outer: float = 0.25
    order: int = 3                                  # 1 bilinear, 3 cubic

    def singular_part(self, r: np.ndarray) -> np.ndarray:
        chi, _, _ = cutoff(r, self.inner, self.outer)
        with np.errstate(divide="ignore"):
            log_r = np.log(r)
        return np.where(chi > 0.0, chi * log_r, 0.0)

    def smooth_at(self, points: np.ndarray) -> np.ndarray:
        delta = min_image(np.asarray(points, dtype=float) - np.asarray(self.center))
        return spline_eval(self.coefficients, delta, self.order)

    @property
    def center_correction(self) -> float:
        """Regular part at the pole: G_a(z) = log|z - a| + S(0) + O(|z - a|^2)."""
        return float(self.correction[0, 0])

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        r = torus_distance(self.center, points)
        return self.singular_part(r) + self.smooth_at(points)

    def on_node(self) -> bool:
        iy, ix = self.grid.node_of(self.center)
        return bool(np.allclose(self.grid.point_of(iy, ix), self.center, atol=1e-12))

    def sample(self, cell_average: bool = False) -> np.ndarray:
        """Node values; the pole node is -inf, or the cell mean of G when `cell_average`."""
        x, y = self.grid.coords()
        points = np.stack([x, y], axis=-1)
        if not self.on_node():
            return self(points)
        iy, ix = self.grid.node_of(self.center)
        r = torus_distance(self.center, points)
        with np.errstate(invalid="ignore"):
            values = self.singular_part(r) + np.roll(self.correction, (iy, ix), axis=(0, 1))
        if cell_average:
            values[iy, ix] = np.log(self.grid.h) + cell_log_mean() + self.center_correction
        return values


class TorusService:
    def __init__(self, grid: TorusGrid):
        """Initialize spectral multipliers for the grid"""
        self.grid = grid
        self.workers = settings.threads
        n = grid.n
        kx = fft.rfftfreq(n, d=1.0 / n)
        ky = fft.fftfreq(n, d=1.0 / n)
        self.kx, self.ky = np.meshgrid(kx, ky, indexing="xy")
        # Laplacian symbols scaled by 1/2pi (dd^c convention)
        self.spectral_symbol = -TWO_PI * (self.kx ** 2 + self.ky ** 2)
        h = grid.h
        self.five_point_symbol = (
            (2.0 * np.cos(TWO_PI * self.kx * h) - 2.0)
            + (2.0 * np.cos(TWO_PI * self.ky * h) - 2.0)
        ) / (h * h) / TWO_PI
        self.nyquist = (np.abs(self.kx) == n // 2) | (np.abs(self.ky) == n // 2)

    # ------------------------------------------------------------------
    # Spectral plumbing
    # ------------------------------------------------------------------

    def forward(self, values: np.ndarray) -> np.ndarray:
        return fft.rfft2(values, workers=self.workers)

    def backward(self, spectrum: np.ndarray) -> np.ndarray:
        n = self.grid.n
        return fft.irfft2(spectrum, s=(n, n), workers=self.workers)

    def symbol(self, stencil: Stencil = "spectral") -> np.ndarray:
        if stencil == "spectral":
            return self.spectral_symbol
        if stencil == "five-point":
            return self.five_point_symbol
        raise ValueError(f"unknown stencil '{stencil}', expected 'spectral' or 'five-point'")

    def apply_multiplier(self, values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
        return self.backward(self.forward(values) * multiplier)

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def laplacian_values(self, values: np.ndarray, stencil: Stencil = "spectral") -> np.ndarray:
        if stencil == "five-point":
            h2 = self.grid.h ** 2
            result = (
                np.roll(values, 1, axis=0) + np.roll(values, -1, axis=0)
                + np.roll(values, 1, axis=1) + np.roll(values, -1, axis=1)
                - 4.0 * values
            ) / h2 / TWO_PI
        else:
            result = self.apply_multiplier(values, self.symbol(stencil))
        return result - result.mean()

    def laplacian(self, f: ScalarField, stencil: Stencil = "spectral") -> ScalarField:
        """Delta~ f = (1/2pi) Delta f, output mean-zero."""
        return ScalarField(self.grid, self.laplacian_values(f.values, stencil), mean_zero=True)

    def solve_poisson(self, rhs: ScalarField, stencil: Stencil = "spectral") -> ScalarField:
        """Unique mean-zero phi with Delta~ phi = rhs."""
        values = rhs.values
        mean = float(values.mean())
        scale = max(1.0, float(np.abs(values).max()))
        if abs(mean) > 1e-10 * scale:
            raise ValueError(
                f"Poisson right-hand side must have zero mean, measured mean {mean:.3e}"
            )
        symbol = self.symbol(stencil)
        inverse = np.zeros_like(symbol)
        nonzero = symbol != 0.0
        inverse[nonzero] = 1.0 / symbol[nonzero]
        phi = self.apply_multiplier(values - mean, inverse)
        return ScalarField(self.grid, phi - phi.mean(), mean_zero=True)

    def gradient(self, f: ScalarField) -> Tuple[np.ndarray, np.ndarray]:
        """Spectral (d/dx, d/dy) of a smooth field."""
        spectrum = self.forward(f.values)
        spectrum[self.nyquist] = 0.0
        fx = self.backward(spectrum * (1j * TWO_PI * self.kx))
        fy = self.backward(spectrum * (1j * TWO_PI * self.ky))
        return fx, fy

    def spline_coefficients(self, values: np.ndarray) -> np.ndarray:
        return ndimage.spline_filter(values, order=3, mode="grid-wrap")

    def interpolate(self, values: np.ndarray, points, coefficients: np.ndarray = None) -> np.ndarray:
        """Periodic cubic-spline evaluation of node values at arbitrary (..., 2) points."""
        points = np.mod(np.asarray(points, dtype=float), 1.0)
        if coefficients is None:
            coefficients = self.spline_coefficients(values)
        return spline_eval(coefficients, points)

    # ------------------------------------------------------------------
    # Green function
    # ------------------------------------------------------------------

    def green_function(self, a: Point) -> GreenFunction:
        """Green function with pole at a (singular log part + cached smooth correction)."""
        if not (0.0 <= a[0] < 1.0 and 0.0 <= a[1] < 1.0):
            raise ValueError(f"Green function pole must lie in [0,1)^2, got {a}")
        correction = _green_correction(
            self.grid.n, settings.green_cutoff_inner, settings.green_cutoff_outer
        )
        return GreenFunction(
            center=(float(a[0]), float(a[1])),
            grid=self.grid,
            correction=correction,
            coefficients=_green_coefficients(
                self.grid.n, settings.green_cutoff_inner, settings.green_cutoff_outer,
                settings.green_interpolation_order,
            ),
            inner=settings.green_cutoff_inner,
            outer=settings.green_cutoff_outer,
            order=settings.green_interpolation_order,
        )

    def green_smooth_source(self, inner: float = None, outer: float = None) -> np.ndarray:
        """g = Delta~(chi log r) - delta on the nodes, for a pole at the origin."""
        inner = settings.green_cutoff_inner if inner is None else inner
        outer = settings.green_cutoff_outer if outer is None else outer
        x, y = self.grid.coords()
        r = np.hypot(min_image(x), min_image(y))
        _, d1, d2 = cutoff(r, inner, outer)
        source = np.zeros_like(r)
        ring = d1 != 0.0
        log_r = np.log(r[ring])
        source[ring] = (d2[ring] * log_r + d1[ring] * (2.0 + log_r) / r[ring]) / TWO_PI
        return source


@lru_cache(maxsize=8)
def _green_correction(n: int, inner: float, outer: float) -> np.ndarray:
    service = TorusService(TorusGrid(n))
    source = service.green_smooth_source(inner, outer)
    rhs = -1.0 - source
    correction = service.solve_poisson(ScalarField(service.grid, rhs - rhs.mean())).values
    # integral of chi(r) log r over the plane fixes the additive constant
    def integrand(r):
        chi, _, _ = cutoff(r, inner, outer)
        return float(chi) * r * np.log(r) if r > 0.0 else 0.0
    singular_integral = TWO_PI * (
        quad(integrand, 0.0, inner, epsabs=1e-14)[0] + quad(integrand, inner, outer, epsabs=1e-14, limit=200)[0]
    )
    correction = correction - correction.mean() - singular_integral
    correction.setflags(write=False)
    return correction


@lru_cache(maxsize=8)
def _green_coefficients(n: int, inner: float, outer: float, order: int = 3) -> np.ndarray:
    correction = _green_correction(n, inner, outer)
    if order == 1:
        return correction
    coefficients = ndimage.spline_filter(correction, order=order, mode="grid-wrap")
    coefficients.setflags(write=False)
    return coefficients
