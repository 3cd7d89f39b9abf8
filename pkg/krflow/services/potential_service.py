#!/usr/bin/env python3
"""
Potential Service
Quasi-subharmonic data psi+ / psi- with logarithmic poles: exact evaluation,
truncation ladders, mass normalization, Lelong-number estimation and the
net-density counterexample.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from krflow.config import log, settings
from krflow.models import ConePoint, Point, PoleSpec, ScalarField, ScenarioConfig, TorusGrid
from krflow.services.torus_service import (
    TWO_PI,
    GreenFunction,
    TorusService,
    cutoff,
    spline_eval,
    torus_distance,
)

LN4 = float(np.log(4.0))


@dataclass(frozen=True)
class SingularPotential:
    """psi(z) = sum_j nu_j G_{a_j}(z) + smooth(z) + constant, all poles of one sign."""
    grid: TorusGrid
    sign: str
    poles: Tuple[PoleSpec, ...] = ()
    greens: Tuple[GreenFunction, ...] = field(default=(), repr=False)
    smooth: Optional[np.ndarray] = field(default=None, repr=False)
    smooth_coefficients: Optional[np.ndarray] = field(default=None, repr=False)
    constant: float = 0.0

    @property
    def nus(self) -> List[float]:
        return [p.nu for p in self.poles]

    @property
    def max_nu(self) -> float:
        """nu_+ or nu_-: the maximal Lelong number of this potential."""
        return max(self.nus, default=0.0)

    @property
    def A(self) -> float:
        return float(sum(self.nus))

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        values = np.full(points.shape[:-1], self.constant, dtype=float)
        for pole, green in zip(self.poles, self.greens):
            values = values + pole.nu * green(points)
        if self.smooth_coefficients is not None:
            values = values + spline_eval(self.smooth_coefficients, np.mod(points, 1.0))
        return values

    def sample(self, cell_average: bool = True) -> np.ndarray:
        """Node values; pole nodes hold the cell mean (finite) unless cell_average is off."""
        values = np.full((self.grid.n, self.grid.n), self.constant, dtype=float)
        for pole, green in zip(self.poles, self.greens):
            values = values + pole.nu * green.sample(cell_average=cell_average)
        if self.smooth is not None:
            values = values + self.smooth
        return values

    def regular_value(self, index: int) -> float:
        """beta in psi(z) = nu log|z - a| + beta + o(1) at pole `index`."""
        pole = self.poles[index]
        beta = self.constant + pole.nu * self.greens[index].center_correction
        for j, (other, green) in enumerate(zip(self.poles, self.greens)):
            if j != index:
                beta += other.nu * float(green(np.asarray(pole.location)))
        if self.smooth_coefficients is not None:
            beta += float(spline_eval(self.smooth_coefficients, np.asarray(pole.location)))
        return beta

    def shifted(self, k: float) -> "SingularPotential":
        return replace(self, constant=self.constant + k)


def net_directions(reach: int) -> Tuple[Tuple[int, int], ...]:
    """Primitive steps (p, q) with max(|p|, |q|) <= reach, one per line direction."""
    steps = []
    for p in range(reach + 1):
        for q in range(-reach, reach + 1):
            if math.gcd(p, q) != 1 or (p == 0 and q != 1):
                continue
            steps.append((p, q))
    return tuple(steps)


@dataclass(frozen=True)
class NetDensity:
    """Log-density psi_j: -ln 4 on a thin tube around the 2^-j net lines, constant elsewhere.

    The lines run through every net point in each direction of ``directions``;
    consecutive net points on a line are joined by a segment of the net.
    """
    grid: TorusGrid
    level: int
    spacing: float
    directions: Tuple[Tuple[int, int], ...]
    half_width: float
    tube_fraction: float
    epsilon: float

    @property
    def outside_value(self) -> float:
        return float(np.log1p(self.epsilon))

    @property
    def mass(self) -> float:
        f = self.tube_fraction
        return f / 4.0 + (1.0 - f) * (1.0 + self.epsilon)

    @property
    def l1_deviation(self) -> float:
        """Integral of |e^psi_j - 1|."""
        f = self.tube_fraction
        return 0.75 * f + (1.0 - f) * self.epsilon

    def line_distance(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        u = points[..., 0] / self.spacing
        v = points[..., 1] / self.spacing
        best = np.full(u.shape, np.inf)
        for p, q in self.directions:
            t = q * u - p * v
            np.minimum(best, np.abs(t - np.rint(t)) / math.hypot(p, q), out=best)
        return self.spacing * best

    def in_tube(self, points) -> np.ndarray:
        return self.line_distance(points) <= self.half_width * (1.0 + 1e-12)

    def __call__(self, points) -> np.ndarray:
        return np.where(self.in_tube(points), -LN4, self.outside_value)

    def chords(self, grid: TorusGrid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node edges between consecutive net points on every net line, at length / 2."""
        n = grid.n
        stride = int(round(self.spacing / grid.h))
        iy, ix = np.meshgrid(np.arange(0, n, stride), np.arange(0, n, stride), indexing="ij")
        iy, ix = iy.ravel(), ix.ravel()
        rows, cols, weights = [], [], []
        for p, q in self.directions:
            rows.append(iy * n + ix)
            cols.append(((iy + q * stride) % n) * n + (ix + p * stride) % n)
            weights.append(np.full(iy.size, 0.5 * math.hypot(p, q) * self.spacing))
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)


class PotentialService:
    def __init__(self, grid: TorusGrid):
        """Initialize potential service on a torus grid"""
        self.grid = grid
        self.torus = TorusService(grid)
        self.stiffness = settings.softmax_stiffness

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------

    def build(self, poles: Sequence[PoleSpec], sign: str = None, smooth: np.ndarray = None) -> SingularPotential:
        """Assemble a one-signed potential from its poles and an optional smooth residual."""
        poles = tuple(poles)
        signs = {p.sign for p in poles}
        if len(signs) > 1:
            raise ValueError("a SingularPotential carries poles of a single sign")
        sign = sign or (signs.pop() if signs else "plus")
        if poles and poles[0].sign != sign:
            raise ValueError(f"poles have sign {poles[0].sign}, potential declared {sign}")
        greens = tuple(self.torus.green_function(p.location) for p in poles)
        coefficients = None
        if smooth is not None:
            smooth = np.asarray(smooth, dtype=float)
            ScalarField(self.grid, smooth)
            coefficients = self.torus.spline_coefficients(smooth)
        return SingularPotential(
            grid=self.grid, sign=sign, poles=poles, greens=greens,
            smooth=smooth, smooth_coefficients=coefficients,
        )

    def from_config(self, config: ScenarioConfig) -> Tuple[SingularPotential, SingularPotential]:
        plus = self.build(config.poles_of("plus"), "plus")
        minus = self.build(config.poles_of("minus"), "minus")
        return plus, minus

    def eval(self, psi: SingularPotential, z: Point) -> float:
        """Exact value at a point; -inf exactly at a pole."""
        for pole in psi.poles:
            if float(torus_distance(pole.location, z)) == 0.0:
                return float("-inf")
        return float(psi(np.asarray(z, dtype=float)))

    # ------------------------------------------------------------------
    # Normalization
    # ------------------------------------------------------------------

    @staticmethod
    def check_no_cusp(minus: SingularPotential):
        for pole in minus.poles:
            if pole.nu >= 2.0:
                raise ValueError(
                    f"cusp: density not integrable (minus-pole at {pole.location} has nu={pole.nu} >= 2)"
                )

    def log_density(self, plus: SingularPotential, minus: SingularPotential) -> Callable[[np.ndarray], np.ndarray]:
        return lambda points: plus(points) - minus(points)

    def normalization_constant(self, plus: SingularPotential, minus: SingularPotential) -> float:
        """c with int e^{psi+ - psi- + c} dA = 1 (polar quadrature on pole disks, grid elsewhere)."""
        self.check_no_cusp(minus)
        total = self.mass(plus, minus)
        return float(-np.log(total))

    def mass(self, plus: SingularPotential, minus: SingularPotential) -> float:
        density = self.log_density(plus, minus)
        poles = [(p, 1.0) for p in plus.poles] + [(p, -1.0) for p in minus.poles]
        radii = self._disk_radii([p for p, _ in poles])

        x, y = self.grid.coords()
        nodes = np.stack([x, y], axis=-1)
        weight = np.ones_like(x)
        for (pole, _), radius in zip(poles, radii):
            eta, _, _ = cutoff(torus_distance(pole.location, nodes), radius / 2.0, radius)
            weight -= eta
        outside = weight > 0.0
        total = float(np.sum(weight[outside] * np.exp(density(nodes[outside])))) * self.grid.cell_area

        for (pole, sign), radius in zip(poles, radii):
            total += self._disk_integral(density, pole, sign, radius)
        return total

    def normalization_constant_grid(self, log_density: np.ndarray) -> float:
        """Trapezoid normalization for grid (truncated) data."""
        return float(-np.log(np.mean(np.exp(log_density))))

    def _disk_radii(self, poles: List[PoleSpec]) -> List[float]:
        radii = []
        for i, pole in enumerate(poles):
            radius = settings.green_cutoff_inner
            for j, other in enumerate(poles):
                if i != j:
                    radius = min(radius, 0.4 * float(torus_distance(pole.location, other.location)))
            radius = max(radius, settings.pole_disk_cells * self.grid.h)
            radii.append(radius)
        return radii

    def _disk_integral(self, density, pole: PoleSpec, sign: float, radius: float) -> float:
        """Integral of eta(r) e^{w} over the pole disk; inner half by Gauss-Jacobi in r."""
        exponent = sign * pole.nu
        m = settings.polar_angular_nodes
        theta = TWO_PI * np.arange(m) / m
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        center = np.asarray(pole.location, dtype=float)

        half = radius / 2.0
        beta = 1.0 + exponent
        x, w = roots_jacobi(settings.polar_radial_nodes, 0.0, beta)
        r = half * (1.0 + x) / 2.0
        points = center + r[:, None, None] * direction[None, :, :]
        regular = np.exp(density(points) - exponent * np.log(r)[:, None])
        inner = (half / 2.0) ** (beta + 1.0) * np.sum(w[:, None] * regular) * TWO_PI / m

        x, w = roots_legendre(settings.polar_radial_nodes)
        r = half + half * (1.0 + x) / 2.0
        eta, _, _ = cutoff(r, half, radius)
        points = center + r[:, None, None] * direction[None, :, :]
        values = (eta * r)[:, None] * np.exp(density(points))
        outer = (half / 2.0) * np.sum(w[:, None] * values) * TWO_PI / m
        return float(inner + outer)

    def excision_ladder(self, psi: SingularPotential, index: int, depth: int = 8) -> List[float]:
        """int_{eps < r < R} e^{-psi} over a pole annulus for eps = R 2^-k, one entry per k."""
        pole = psi.poles[index]
        radius = settings.green_cutoff_inner / 2.0
        m = settings.polar_angular_nodes
        theta = TWO_PI * np.arange(m) / m
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        center = np.asarray(pole.location, dtype=float)
        x, w = roots_legendre(settings.polar_radial_nodes)
        integrals = []
        running = 0.0
        outer = radius
        for _ in range(depth):
            inner = outer / 2.0
            # log-spaced annulus: r = e^s, dA = r^2 ds dtheta
            s = np.log(inner) + (np.log(outer) - np.log(inner)) * (1.0 + x) / 2.0
            r = np.exp(s)
            points = center + r[:, None, None] * direction[None, :, :]
            values = (r ** 2)[:, None] * np.exp(-psi(points))
            running += (np.log(outer) - np.log(inner)) / 2.0 * np.sum(w[:, None] * values) * TWO_PI / m
            integrals.append(float(running))
            outer = inner
        return integrals

    def annulus_ratio(self, psi: SingularPotential, index: int, depth: int = 8) -> float:
        """Ratio of the last two dyadic annulus increments of e^{-psi}; below 1 iff it is integrable."""
        increments = np.diff([0.0] + self.excision_ladder(psi, index, depth))
        return float(increments[-1] / increments[-2])

    # ------------------------------------------------------------------
    # Truncation ladder
    # ------------------------------------------------------------------

    def truncate(self, psi: Union[SingularPotential, np.ndarray], j: float) -> ScalarField:
        """psi^(j) = log(e^{s psi} + e^{-s j}) / s on the nodes."""
        if j <= 0:
            raise ValueError(f"truncation level must be positive, got {j}")
        values = psi.sample() if isinstance(psi, SingularPotential) else np.asarray(psi, dtype=float)
        s = self.stiffness
        return ScalarField(self.grid, np.logaddexp(s * values, -s * j) / s)

    # ------------------------------------------------------------------
    # Lelong numbers
    # ------------------------------------------------------------------

    def lelong_estimate(self, psi: Callable[[np.ndarray], np.ndarray], a: Point,
                        poles: Sequence[PoleSpec] = None) -> Tuple[float, float]:
        """Slope of circle means against log r, with the fit residual."""
        if poles is None:
            poles = getattr(psi, "poles", ())
        h = self.grid.h
        radii = np.array(settings.lelong_radii_cells, dtype=float) * h
        for pole in poles:
            gap = float(torus_distance(pole.location, a))
            if 0.0 < gap <= radii.max() + settings.pole_disk_cells * h:
                raise ValueError(
                    f"poles too close to estimate: pole at {pole.location} is {gap:.4g} from {a}"
                )
        m = settings.circle_samples
        theta = TWO_PI * np.arange(m) / m
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        points = np.asarray(a, dtype=float) + radii[:, None, None] * direction[None, :, :]
        means = np.asarray(psi(points)).mean(axis=1)
        design = np.stack([np.log(radii), np.ones_like(radii), radii ** 2], axis=1)
        coeffs, *_ = np.linalg.lstsq(design, means, rcond=None)
        residual = float(np.sqrt(np.mean((design @ coeffs - means) ** 2)))
        return float(coeffs[0]), residual

    # ------------------------------------------------------------------
    # Pole bookkeeping
    # ------------------------------------------------------------------

    def cone_angles(self, plus: SingularPotential, minus: SingularPotential) -> List[ConePoint]:
        """Cone angle 2pi(1 +- nu/2) and curvature mass -+nu of every pole of e^{psi+ - psi-}|dz|^2."""
        points = []
        for pole in plus.poles:
            points.append(ConePoint(
                x=pole.x, y=pole.y, sign="plus", nu=pole.nu,
                angle=TWO_PI * (1.0 + pole.nu / 2.0), curvature_mass=-pole.nu, cusp=False,
            ))
        for pole in minus.poles:
            points.append(ConePoint(
                x=pole.x, y=pole.y, sign="minus", nu=pole.nu,
                angle=TWO_PI * (1.0 - pole.nu / 2.0), curvature_mass=pole.nu, cusp=pole.nu >= 2.0,
            ))
        return points

    def smooth_laplacian(self, psi: SingularPotential) -> np.ndarray:
        """Delta~ psi off the poles, from the Green split (analytic ring term + spectral correction)."""
        source = self.torus.green_smooth_source()
        values = np.zeros((self.grid.n, self.grid.n))
        for pole, green in zip(psi.poles, psi.greens):
            iy, ix = self.grid.node_of(pole.location)
            regular = source + self.torus.laplacian_values(green.correction)
            values += pole.nu * np.roll(regular, (iy, ix), axis=(0, 1))
        if psi.smooth is not None:
            values += self.torus.laplacian_values(psi.smooth)
        return values

    def quasi_psh_constant(self, psi: SingularPotential) -> float:
        """A with Delta~ psi + A >= 0 off the poles: sum nu plus the smooth residual's deficit."""
        deficit = 0.0
        if psi.smooth is not None:
            deficit = max(0.0, float(-self.torus.laplacian_values(psi.smooth).min()))
        return psi.A + deficit

    # ------------------------------------------------------------------
    # Counterexample
    # ------------------------------------------------------------------

    def counterexample_density(self, j: int) -> NetDensity:
        """Unit-mass log-density equal to -ln 4 on a tube around the 2^-j net.

        Net lines run in every primitive direction (p, q) with max(|p|, |q|) <= j - 1,
        so the detour along the net shrinks with the level.
        """
        if not 2 <= j <= 7:
            raise ValueError(f"counterexample level must lie in 2..7, got {j}")
        spacing = 2.0 ** -j
        if spacing < 4 * self.grid.h:
            raise ValueError(
                f"resolution too coarse for level {j}: net spacing {spacing:.4g} < 4h at n={self.grid.n}"
            )
        directions = net_directions(j - 1)
        total = sum(math.hypot(p, q) for p, q in directions)
        # strip fraction ~ 2 (w / s) * total; aim at 90% of the L1 bound 2^-j
        half_width = 0.3 * spacing ** 2 / total
        fraction = self.tube_fraction(half_width / spacing, directions)
        epsilon = 0.75 * fraction / (1.0 - fraction)
        log(f"🧪 Net density level {j}: {len(directions)} directions, "
            f"tube fraction {fraction:.4e}, epsilon {epsilon:.4e}")
        return NetDensity(
            grid=self.grid, level=j, spacing=spacing, directions=directions,
            half_width=half_width, tube_fraction=fraction, epsilon=epsilon,
        )

    @staticmethod
    def tube_fraction(a: float, directions: Sequence[Tuple[int, int]]) -> float:
        """Exact area of the union of strips of half-width a around the net lines, cell side 1.

        Horizontal slices meet every slanted strip in an interval whose ends move
        linearly with the height, so the covered length is linear between heights
        where two strip edges cross; midpoints of those pieces integrate it exactly.
        """
        if (1, 0) not in directions:
            raise ValueError("the net always carries horizontal lines")
        slanted = [(p, q) for p, q in directions if q != 0]
        halves = [a * math.hypot(p, q) / abs(q) for p, q in slanted]
        cuts = [np.array([a, 1.0 - a])]
        for i, ((p1, q1), half1) in enumerate(zip(slanted, halves)):
            for (p2, q2), half2 in zip(slanted[i + 1:], halves[i + 1:]):
                det = p1 * q2 - p2 * q1
                g = math.gcd(q1, q2)
                steps = g * np.arange(abs(det) // g)
                for s1 in (-1.0, 1.0):
                    for s2 in (-1.0, 1.0):
                        shift = q1 * q2 * (s2 * half2 - s1 * half1)
                        cuts.append(np.mod((steps + shift) / det, 1.0))
        cuts = np.unique(np.concatenate(cuts))
        cuts = cuts[(cuts >= a) & (cuts <= 1.0 - a)]
        middles = (cuts[:-1] + cuts[1:]) / 2.0
        covered = np.concatenate([
            _slice_cover(middles[k:k + 4096], slanted, halves) for k in range(0, len(middles), 4096)
        ]) if len(middles) else np.zeros(0)
        # horizontal strip covers heights within a of the cell edge
        return float(2.0 * a + np.dot(np.diff(cuts), covered))


def _slice_cover(v: np.ndarray, slanted, halves) -> np.ndarray:
    """Covered length of the slanted strips on the horizontal circles at heights v."""
    starts, lengths = [], []
    for (p, q), half in zip(slanted, halves):
        centres = (np.arange(abs(q))[None, :] + p * v[:, None]) / q
        starts.append(np.mod(centres - half, 1.0))
        lengths.append(np.full(abs(q), 2.0 * half))
    starts = np.concatenate(starts, axis=1)
    ends = starts + np.concatenate(lengths)[None, :]
    # split intervals that wrap past 1 into two pieces on [0, 1)
    wrap = ends > 1.0
    extra_end = np.where(wrap, ends - 1.0, 0.0)
    ends = np.minimum(ends, 1.0)
    s = np.concatenate([starts, np.zeros_like(starts)], axis=1)
    e = np.concatenate([ends, extra_end], axis=1)
    order = np.argsort(s, axis=1)
    s = np.take_along_axis(s, order, axis=1)
    e = np.take_along_axis(e, order, axis=1)
    reach = np.maximum.accumulate(e, axis=1)
    previous = np.concatenate([np.zeros((len(v), 1)), reach[:, :-1]], axis=1)
    return np.maximum(0.0, e - np.maximum(s, previous)).sum(axis=1)
