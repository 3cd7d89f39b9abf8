#!/usr/bin/env python3
"""
Metric Service
Distances of conformal metrics e^u |dz|^2 on the torus, including the singular
limit metric: curve lengths, lattice (Dijkstra) and fast-marching distance
fields, Hölder envelope fits and distance comparisons.
"""

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.special import roots_jacobi, roots_legendre

from krflow.config import log, settings
from krflow.models import DistanceField, HolderFit, Point, Polyline, ScalarField, TorusGrid
from krflow.services.potential_service import PotentialService, SingularPotential
from krflow.services.torus_service import (
    TorusService,
    cell_power_mean,
    min_image,
    spline_eval,
    torus_distance,
)

# king + knight moves, one representative per undirected direction
LATTICE_OFFSETS = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)]


@dataclass(frozen=True)
class MetricPole:
    """Near the pole the length element is coefficient * r**exponent * (1 + o(1))."""
    location: Point
    exponent: float
    coefficient: float


@dataclass(frozen=True)
class ConformalMetric:
    grid: TorusGrid
    tag: str
    log_factor_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    poles: Tuple[MetricPole, ...] = ()
    # extra lattice edges (rows, cols, weights) for curves the metric shortens exactly
    chords: Optional[Callable[[TorusGrid], Tuple[np.ndarray, np.ndarray, np.ndarray]]] = field(
        default=None, repr=False)

    def log_factor(self, points) -> np.ndarray:
        return self.log_factor_fn(np.asarray(points, dtype=float))

    def speed(self, points) -> np.ndarray:
        """Length element e^{u/2}."""
        return np.exp(0.5 * self.log_factor(points))


def _solve_pair(a: float, b: float, g: float) -> float:
    if a > b:
        a, b = b, a
    if a == math.inf:
        return math.inf
    if b - a >= g:
        return a + g
    return 0.5 * (a + b + math.sqrt(2.0 * g * g - (a - b) ** 2))


def fast_march(slowness: np.ndarray, h: float, seed_index: Sequence[int],
               seed_values: Sequence[float]) -> np.ndarray:
    """First-order fast marching for |grad d| = slowness on the periodic grid.

    Axis and diagonal upwind stencils are both tried and the smaller value kept.
    Seeded nodes keep their values.
    """
    n = slowness.shape[0]
    size = n * n
    f = slowness.ravel().tolist()
    values = [math.inf] * size
    accepted = bytearray(size)
    fixed = bytearray(size)
    heap = []
    for index, value in zip(seed_index, seed_values):
        values[index] = float(value)
        fixed[index] = 1
        heapq.heappush(heap, (float(value), index))
    diagonal = h * math.sqrt(2.0)
    inf = math.inf
    last = -inf

    def known(i, j):
        index = (i % n) * n + (j % n)
        return values[index] if accepted[index] else inf

    while heap:
        value, index = heapq.heappop(heap)
        if accepted[index] or value > values[index]:
            continue
        if value < last - 1e-12 * max(1.0, abs(last)):
            raise RuntimeError(
                f"non-monotone heap update: popped {value:.6g} after {last:.6g}; metric values corrupted?"
            )
        last = value
        accepted[index] = 1
        i, j = divmod(index, n)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ni, nj = (i + di) % n, (j + dj) % n
                neighbour = ni * n + nj
                if accepted[neighbour] or fixed[neighbour]:
                    continue
                cost = f[neighbour]
                axis = _solve_pair(
                    min(known(ni, nj - 1), known(ni, nj + 1)),
                    min(known(ni - 1, nj), known(ni + 1, nj)),
                    cost * h,
                )
                cross = _solve_pair(
                    min(known(ni - 1, nj - 1), known(ni + 1, nj + 1)),
                    min(known(ni - 1, nj + 1), known(ni + 1, nj - 1)),
                    cost * diagonal,
                )
                candidate = axis if axis < cross else cross
                if candidate < values[neighbour]:
                    values[neighbour] = candidate
                    heapq.heappush(heap, (candidate, neighbour))
    return np.array(values).reshape(n, n)


class MetricService:
    def __init__(self, grid: TorusGrid):
        """Initialize metric service on a torus grid"""
        self.grid = grid
        self.torus = TorusService(grid)
        self.potentials = PotentialService(grid)
        self.tolerance = settings.quadrature_rel_tol
        self.gauss = roots_legendre(settings.gauss_order)

    # ------------------------------------------------------------------
    # Metrics
    # ------------------------------------------------------------------

    def from_field(self, u: ScalarField, tag: str = "field") -> ConformalMetric:
        """Smooth metric e^{u}|dz|^2 from node values (cubic periodic interpolation)."""
        coefficients = self.torus.spline_coefficients(u.values)
        return ConformalMetric(
            grid=self.grid, tag=tag,
            log_factor_fn=lambda points: spline_eval(coefficients, np.mod(points, 1.0)),
        )

    def from_callable(self, fn: Callable[[np.ndarray], np.ndarray], tag: str,
                      chords: Callable[[TorusGrid], Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
                      ) -> ConformalMetric:
        return ConformalMetric(grid=self.grid, tag=tag, log_factor_fn=fn, chords=chords)

    def from_potentials(self, plus: SingularPotential, minus: SingularPotential, c: float = 0.0,
                        scale: float = 1.0, tag: str = "limit") -> ConformalMetric:
        """Metric with u = scale (psi+ - psi-) + c and analytic pole annotations."""
        poles = []
        for index, pole in enumerate(plus.poles):
            beta = plus.regular_value(index) - float(minus(np.asarray(pole.location)))
            poles.append(MetricPole(
                location=pole.location,
                exponent=scale * pole.nu / 2.0,
                coefficient=float(np.exp((scale * beta + c) / 2.0)),
            ))
        for index, pole in enumerate(minus.poles):
            if scale * pole.nu >= 2.0:
                raise ValueError(
                    f"cusp: density not integrable (minus-pole at {pole.location}, effective nu {scale * pole.nu})"
                )
            beta = float(plus(np.asarray(pole.location))) - minus.regular_value(index)
            poles.append(MetricPole(
                location=pole.location,
                exponent=-scale * pole.nu / 2.0,
                coefficient=float(np.exp((scale * beta + c) / 2.0)),
            ))
        return ConformalMetric(
            grid=self.grid, tag=tag,
            log_factor_fn=lambda points: scale * (plus(points) - minus(points)) + c,
            poles=tuple(poles),
        )

    def limit_metric(self, plus: SingularPotential, minus: SingularPotential) -> ConformalMetric:
        c = self.potentials.normalization_constant(plus, minus)
        return self.from_potentials(plus, minus, c, tag="limit")

    # ------------------------------------------------------------------
    # Curve length
    # ------------------------------------------------------------------

    def _gauss_segment(self, m: ConformalMetric, p: np.ndarray, d: np.ndarray, a: float, b: float) -> float:
        x, w = self.gauss
        s = a + (b - a) * (1.0 + x) / 2.0
        points = p + s[:, None] * d
        return float((b - a) / 2.0 * np.linalg.norm(d) * np.sum(w * m.speed(points)))

    def _adaptive(self, m, p, d, a, b, whole, depth=0) -> float:
        middle = (a + b) / 2.0
        left = self._gauss_segment(m, p, d, a, middle)
        right = self._gauss_segment(m, p, d, middle, b)
        refined = left + right
        if abs(refined - whole) <= self.tolerance * abs(refined) or depth >= 40:
            return refined
        return (self._adaptive(m, p, d, a, middle, left, depth + 1)
                + self._adaptive(m, p, d, middle, b, right, depth + 1))

    def _radial_integral(self, m: ConformalMetric, pole: MetricPole, origin: np.ndarray,
                         direction: np.ndarray, rho: float) -> float:
        """int_0^rho speed(origin + r direction) dr with Gauss-Jacobi weight r**exponent."""
        order = max(16, 3 * settings.gauss_order)
        x, w = roots_jacobi(order, 0.0, pole.exponent)
        r = rho * (1.0 + x) / 2.0
        points = origin + r[:, None] * direction
        regular = m.speed(points) / r ** pole.exponent
        return float((rho / 2.0) ** (pole.exponent + 1.0) * np.sum(w * regular))

    def segment_length(self, m: ConformalMetric, p, d) -> float:
        """Length of the straight segment p -> p + d under m."""
        p = np.asarray(p, dtype=float)
        d = np.asarray(d, dtype=float)
        length = float(np.linalg.norm(d))
        if length == 0.0:
            return 0.0
        near = settings.pole_disk_cells * self.grid.h
        cuts = {0.0, 1.0}
        at_start: Optional[MetricPole] = None
        at_end: Optional[MetricPole] = None
        for pole in m.poles:
            image = p + min_image(np.asarray(pole.location) - p)
            s = float(np.clip(np.dot(image - p, d) / length ** 2, 0.0, 1.0))
            gap = float(np.linalg.norm(image - (p + s * d)))
            if gap <= 1e-12:
                if s * length <= 1e-12:
                    at_start = pole
                elif (1.0 - s) * length <= 1e-12:
                    at_end = pole
                else:
                    raise ValueError(
                        f"segment passes through the pole at {pole.location}; split the curve there"
                    )
            elif gap < near and 0.0 < s < 1.0:
                cuts.add(s)
        cuts = sorted(cuts)
        reach = settings.green_cutoff_inner / 2.0
        total = 0.0
        for a, b in zip(cuts, cuts[1:]):
            if a == 0.0 and at_start is not None:
                rho = min((b - a) * length / (2.0 if (b == 1.0 and at_end) else 1.0), reach)
                total += self._radial_integral(m, at_start, p, d / length, rho)
                a = a + rho / length
            if b == 1.0 and at_end is not None:
                rho = min((b - a) * length, reach)
                total += self._radial_integral(m, at_end, p + d, -d / length, rho)
                b = b - rho / length
            if b - a > 1e-15:
                whole = self._gauss_segment(m, p, d, a, b)
                total += self._adaptive(m, p, d, a, b, whole)
        return total

    def curve_length(self, gamma: Polyline, m: ConformalMetric) -> float:
        """Sum of segment lengths; segments follow the shortest translate."""
        return float(sum(self.segment_length(m, start, step) for start, step in gamma.segments()))

    # ------------------------------------------------------------------
    # Lattice oracle
    # ------------------------------------------------------------------

    def lattice_graph(self, m: ConformalMetric):
        """Sparse 16-neighbour graph of m, plus its chords; rebuilt on every call."""
        n = self.grid.n
        h = self.grid.h
        x, w = roots_legendre(settings.lattice_gauss_order)
        s = (1.0 + x) / 2.0
        iy, ix = np.indices((n, n))
        start = np.stack([ix * h, iy * h], axis=-1)
        rows, cols, weights = [], [], []
        for dx, dy in LATTICE_OFFSETS:
            step = np.array([dx * h, dy * h])
            points = start[:, :, None, :] + s[None, None, :, None] * step
            speeds = m.speed(points)
            weight = np.linalg.norm(step) / 2.0 * np.sum(w * speeds, axis=-1)
            rows.append((iy * n + ix).ravel())
            cols.append((((iy + dy) % n) * n + (ix + dx) % n).ravel())
            weights.append(weight.ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        weights = np.concatenate(weights)
        if m.poles:
            self._repair_pole_edges(m, rows, weights)
        if m.chords is not None:
            extra_rows, extra_cols, extra_weights = m.chords(self.grid)
            rows = np.concatenate([rows, extra_rows])
            cols = np.concatenate([cols, extra_cols])
            weights = np.concatenate([weights, extra_weights])
        return coo_matrix((weights, (rows, cols)), shape=(n * n, n * n)).tocsr()

    def _repair_pole_edges(self, m: ConformalMetric, rows: np.ndarray, weights: np.ndarray):
        """Recompute edges near poles with the pole-aware segment quadrature."""
        n = self.grid.n
        h = self.grid.h
        block = n * n
        window = settings.pole_disk_cells + 2
        for pole in m.poles:
            piy, pix = self.grid.node_of(pole.location)
            for k, (dx, dy) in enumerate(LATTICE_OFFSETS):
                step = np.array([dx * h, dy * h])
                for oy in range(-window, window + 1):
                    for ox in range(-window, window + 1):
                        iy, ix = (piy + oy) % n, (pix + ox) % n
                        start = np.array([ix * h, iy * h])
                        image = start + min_image(np.asarray(pole.location) - start)
                        s = np.clip(np.dot(image - start, step) / np.dot(step, step), 0.0, 1.0)
                        if np.linalg.norm(image - (start + s * step)) >= settings.pole_disk_cells * h:
                            continue
                        edge = k * block + iy * n + ix
                        try:
                            weights[edge] = self.segment_length(m, start, step)
                        except ValueError:
                            middle = image - start
                            weights[edge] = (self.segment_length(m, start, middle)
                                             + self.segment_length(m, image, step - middle))

    def lattice_distance(self, m: ConformalMetric, sources: Sequence[Point]) -> List[DistanceField]:
        """Exact shortest paths on the 16-neighbour periodic graph from each source node."""
        graph = self.lattice_graph(m)
        nodes = [self.grid.node_of(source) for source in sources]
        indices = [iy * self.grid.n + ix for iy, ix in nodes]
        table = dijkstra(graph, directed=False, indices=indices)
        table = np.atleast_2d(table)
        return [
            DistanceField(
                source=self.grid.point_of(iy, ix),
                values=table[k].reshape(self.grid.n, self.grid.n),
                grid=self.grid, metric_tag=m.tag, method="lattice-oracle",
            )
            for k, (iy, ix) in enumerate(nodes)
        ]

    # ------------------------------------------------------------------
    # Fast marching
    # ------------------------------------------------------------------

    def slowness_grid(self, m: ConformalMetric) -> np.ndarray:
        """Node slowness e^{u/2}; cells near poles use cell averages."""
        x, y = self.grid.coords()
        nodes = np.stack([x, y], axis=-1)
        h = self.grid.h
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            slowness = m.speed(nodes)
        gx, gw = roots_legendre(6)
        offsets = gx * h / 2.0
        cell_x, cell_y = np.meshgrid(offsets, offsets, indexing="xy")
        cell_w = np.outer(gw, gw) / 4.0
        radius = settings.fmm_seed_cells * h
        for pole in m.poles:
            piy, pix = self.grid.node_of(pole.location)
            distances = torus_distance(pole.location, nodes)
            for iy, ix in zip(*np.nonzero(distances <= radius + 1e-12)):
                if (iy, ix) == (piy, pix) and distances[iy, ix] < 1e-12:
                    slowness[iy, ix] = pole.coefficient * h ** pole.exponent * cell_power_mean(pole.exponent)
                    continue
                points = np.stack([nodes[iy, ix, 0] + cell_x, nodes[iy, ix, 1] + cell_y], axis=-1)
                slowness[iy, ix] = float(np.sum(cell_w * m.speed(points)))
        if not np.all(np.isfinite(slowness)) or slowness.min() < 0.0:
            raise RuntimeError(f"metric '{m.tag}' produced non-finite slowness values")
        return slowness

    def _seeds(self, m: ConformalMetric, source_node: Tuple[int, int]) -> Tuple[List[int], List[float]]:
        """Straight-chord lengths from the source to nodes in the seed disk."""
        n = self.grid.n
        h = self.grid.h
        iy0, ix0 = source_node
        origin = np.array(self.grid.point_of(iy0, ix0))
        pole = next(
            (p for p in m.poles if float(torus_distance(p.location, origin)) < 1e-12), None
        )
        exponent = pole.exponent if pole is not None else 0.0
        cells = settings.fmm_seed_cells
        offsets = [(oy, ox) for oy in range(-cells, cells + 1) for ox in range(-cells, cells + 1)
                   if 0 < oy * oy + ox * ox <= cells * cells]
        deltas = np.array([[ox * h, oy * h] for oy, ox in offsets])
        rho = np.linalg.norm(deltas, axis=1)
        directions = deltas / rho[:, None]
        order = max(16, 3 * settings.gauss_order)
        x, w = roots_jacobi(order, 0.0, exponent)
        r = rho[:, None] * (1.0 + x[None, :]) / 2.0
        points = origin + r[..., None] * directions[:, None, :]
        regular = m.speed(points) / r ** exponent
        lengths = (rho / 2.0) ** (exponent + 1.0) * np.sum(w * regular, axis=1)
        index = [iy0 * n + ix0] + [((iy0 + oy) % n) * n + (ix0 + ox) % n for oy, ox in offsets]
        return index, [0.0] + lengths.tolist()

    def eikonal_distance(self, m: ConformalMetric, sources: Sequence[Point]) -> List[DistanceField]:
        """Fast-marching distance fields, one per source (process pool when threads > 1)."""
        slowness = self.slowness_grid(m)
        nodes = [self.grid.node_of(source) for source in sources]
        seeds = [self._seeds(m, node) for node in nodes]
        h = self.grid.h
        if settings.threads > 1 and len(nodes) > 1:
            with ProcessPoolExecutor(max_workers=min(settings.threads, len(nodes))) as pool:
                futures = [pool.submit(fast_march, slowness, h, index, values) for index, values in seeds]
                tables = [future.result() for future in futures]
        else:
            tables = [fast_march(slowness, h, index, values) for index, values in seeds]
        return [
            DistanceField(
                source=self.grid.point_of(iy, ix), values=table,
                grid=self.grid, metric_tag=m.tag, method="eikonal",
            )
            for (iy, ix), table in zip(nodes, tables)
        ]

    def dT_distance(self, plus: SingularPotential, minus: SingularPotential,
                    sources: Sequence[Point] = None) -> List[DistanceField]:
        """Distance fields of the limit current T = e^{psi+ - psi- + c} omega."""
        self.potentials.check_no_cusp(minus)
        m = self.limit_metric(plus, minus)
        if sources is None:
            sources = [p.location for p in plus.poles + minus.poles]
        log(f"🔄 Limit distances d_T from {len(sources)} sources on n={self.grid.n}")
        return self.eikonal_distance(m, sources)

    def flat_field(self, source: Point) -> DistanceField:
        iy, ix = self.grid.node_of(source)
        origin = self.grid.point_of(iy, ix)
        x, y = self.grid.coords()
        return DistanceField(
            source=origin, values=torus_distance(origin, np.stack([x, y], axis=-1)),
            grid=self.grid, metric_tag="flat", method="lattice-oracle",
        )

    # ------------------------------------------------------------------
    # Pairs, fits and comparisons
    # ------------------------------------------------------------------

    def random_nodes(self, count: int, seed: int) -> List[Point]:
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, self.grid.n, size=(count, 2))
        return [self.grid.point_of(int(iy), int(ix)) for iy, ix in picks]

    def random_pairs(self, sources: int, per_source: int, seed: int) -> np.ndarray:
        """(field index, iy, ix) rows with uniformly drawn target nodes."""
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, self.grid.n, size=(sources * per_source, 2))
        owners = np.repeat(np.arange(sources), per_source)
        return np.column_stack([owners, targets])

    def radial_pairs(self, field_index: int, source: Point, max_radius: float,
                     min_cells: int = 1) -> np.ndarray:
        """Targets along the eight lattice rays at radii 2^k h (plus midpoints) up to max_radius."""
        iy0, ix0 = self.grid.node_of(source)
        n = self.grid.n
        rows = []
        steps = sorted({int(round(c)) for k in range(0, 16)
                        for c in (2 ** k, 1.5 * 2 ** k) if c >= min_cells})
        for cells in steps:
            for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)):
                if cells * self.grid.h * math.hypot(dx, dy) > max_radius:
                    continue
                rows.append((field_index, (iy0 + dy * cells) % n, (ix0 + dx * cells) % n))
        return np.array(rows, dtype=int).reshape(-1, 3)

    @staticmethod
    def pair_values(fields: Sequence[DistanceField], pairs: np.ndarray) -> np.ndarray:
        return np.array([fields[int(k)].values[int(iy), int(ix)] for k, iy, ix in pairs])

    def flat_pair_values(self, fields: Sequence[DistanceField], pairs: np.ndarray) -> np.ndarray:
        return np.array([
            float(torus_distance(fields[int(k)].source, self.grid.point_of(int(iy), int(ix))))
            for k, iy, ix in pairs
        ])

    def holder_fit(self, d_a: np.ndarray, d_b: np.ndarray, direction: str = "upper") -> HolderFit:
        """Envelope log dA <= alpha log dB + log C (>= for "lower") over a fixed alpha grid.

        Every grid exponent gets its optimal constant; the reported exponent is the one
        whose envelope hugs the data tightest. The least-squares slope is kept alongside.
        """
        d_a = np.asarray(d_a, dtype=float)
        d_b = np.asarray(d_b, dtype=float)
        keep = (d_a > 0.0) & (d_b > 0.0)
        d_a, d_b = d_a[keep], d_b[keep]
        if len(d_b) < settings.holder_min_pairs:
            raise ValueError(f"Hölder fit needs >= {settings.holder_min_pairs} pairs, got {len(d_b)}")
        span = float(np.log10(d_b.max() / d_b.min()))
        if span < settings.holder_min_decades:
            raise ValueError(
                f"degenerate span: reference distances cover {span:.2f} decades, need {settings.holder_min_decades}"
            )
        x = np.log(d_b)
        y = np.log(d_a)
        slope, intercept = np.polyfit(x, y, 1)
        residual = float(np.sqrt(np.mean((slope * x + intercept - y) ** 2)))
        alphas = holder_alpha_grid()
        ratios = y[None, :] - alphas[:, None] * x[None, :]
        if direction == "upper":
            log_constants = ratios.max(axis=1)
            width = log_constants - ratios.mean(axis=1)
        else:
            log_constants = ratios.min(axis=1)
            width = ratios.mean(axis=1) - log_constants
        best = int(np.argmin(width))
        return HolderFit(
            exponent=float(alphas[best]), constant=float(np.exp(log_constants[best])),
            residual=residual, direction=direction, pairs=len(d_b), slope=float(slope),
        )

    def sup_discrepancy(self, d1: Sequence[DistanceField], d2: Sequence[DistanceField],
                        pairs: np.ndarray = None) -> float:
        """max over pairs of |d1 - d2|; all nodes of every source when pairs is None."""
        if len(d1) != len(d2):
            raise ValueError("distance sets must share their sources")
        for a, b in zip(d1, d2):
            if float(torus_distance(a.source, b.source)) > 1e-12:
                raise ValueError(f"distance sets must share their sources: {a.source} vs {b.source}")
        if pairs is None:
            return float(max(np.abs(a.values - b.values).max() for a, b in zip(d1, d2)))
        return float(np.abs(self.pair_values(d1, pairs) - self.pair_values(d2, pairs)).max())

    @staticmethod
    def diameter(fields: Sequence[DistanceField]) -> float:
        return float(max(f.values.max() for f in fields))


def holder_alpha_grid() -> np.ndarray:
    """Exponents k * step strictly inside (0, 3)."""
    step = settings.holder_alpha_step
    return step * np.arange(1, int(round(3.0 / step)))
