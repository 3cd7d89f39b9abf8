#!/usr/bin/env python3
"""
Verify Service
Executable estimate checks over flow trajectories and limit metrics: bounds along
the flow, curve integrability, Ricci-measure convergence, Gauss-Bonnet, distance
convergence and the weak-convergence counterexample.
"""

import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import fft
from scipy.integrate import trapezoid
from scipy.special import lambertw

from krflow.config import log, settings
from krflow.models import (
    CheckResult,
    CurvatureMeasure,
    EstimateReport,
    FlowState,
    Point,
    PoleSpec,
    Polyline,
    ScalarField,
    ScenarioConfig,
    TorusGrid,
    Trajectory,
)
from krflow.services.flow_service import FlowService
from krflow.services.metric_service import ConformalMetric, MetricPole, MetricService
from krflow.services.potential_service import PotentialService, SingularPotential
from krflow.services.torus_service import TWO_PI, min_image

FLAT_DIAMETER = float(np.sqrt(2.0) / 2.0)

# (m, l, phase) of the band-limited test functions cos(2 pi (m x + l y) + phase)
TEST_MODES = [
    (1, 0, 0.0), (0, 1, 0.0), (1, 1, 0.0), (1, -1, np.pi / 4),
    (2, 0, np.pi / 4), (0, 2, 0.0), (2, 1, 0.0), (1, 2, np.pi / 4),
]


@dataclass(frozen=True)
class ScalingFit:
    """Curve integrals of e^{-psi/s} over segment families, one slope per offset."""
    nu_eff: float
    lengths: Tuple[float, ...]
    offsets: Tuple[float, ...]
    integrals: np.ndarray
    slopes: Tuple[float, ...]

    @property
    def min_slope(self) -> float:
        return float(min(self.slopes))


def non_decreasing(values: Sequence[float], noise: float) -> Tuple[bool, float]:
    """True when values (ordered by ascending t) never drop by more than noise; worst drop."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return True, 0.0
    drop = float(np.max(values[:-1] - values[1:]))
    return drop <= noise, max(drop, 0.0)


def drift(values: Sequence[float], floor: float = 0.0) -> float:
    """max/min ratio of positive fitted constants, each raised to at least floor."""
    values = np.maximum(np.asarray(values, dtype=float), floor)
    if values.min() <= 0.0:
        return float("inf")
    return float(values.max() / values.min())


def growth_constant(times: Sequence[float], gamma: Sequence[float]) -> float:
    """Smallest C with gamma(t) <= C e^{C t} at every sampled t."""
    constants = []
    for t, g in zip(times, gamma):
        if t <= 0.0:
            constants.append(g)
        else:
            constants.append(float(np.real(lambertw(t * g))) / t)
    return float(max(constants))


class VerifyService:
    def __init__(self, config: ScenarioConfig, scenario: str = "scenario"):
        """Initialize verify service for one scenario"""
        self.config = config
        self.scenario = scenario
        self.grid = TorusGrid(config.grid.n)
        self.potentials = PotentialService(self.grid)
        self.flow = FlowService(self.grid)
        self.plus, self.minus = self.potentials.from_config(config)
        self.seed = config.sampling.seed
        self._lock = threading.RLock()
        self._cache: Dict[str, object] = {}

        self.checks: Dict[str, Callable[[], CheckResult]] = {
            "flat_stationarity": self.flat_stationarity,
            "linearized_decay": self.linearized_decay,
            "area_conservation": self.area_conservation,
            "maximum_principle": self.maximum_principle,
            "phidot_bounds": self.phidot_bounds,
            "lp_monotonicity": self.lp_monotonicity,
            "mass_monotonicity": self.mass_monotonicity,
            "time_concavity": self.time_concavity,
            "cone_cusp_exponents": self.cone_cusp_exponents,
            "equicontinuity": self.equicontinuity,
            "curve_integrability": self.curve_integrability,
            "density_lemma": self.density_lemma,
            "ricci_convergence": self.ricci_convergence,
            "gauss_bonnet": self.gauss_bonnet,
            "flow_metric_convergence": self.flow_metric_convergence,
            "method_cross_validation": self.method_cross_validation,
            "gradient_bound": self.gradient_bound,
            "diameter_bound": self.diameter_bound,
            "quasi_psh_precondition": self.quasi_psh_precondition,
        }
        names = config.checks.names
        if names != "all":
            unknown = [name for name in names if name not in self.checks and name != "counterexample"]
            if unknown:
                raise ValueError(f"unknown checks {unknown}; available: {sorted(self.checks) + ['counterexample']}")

    # ------------------------------------------------------------------
    # Shared artifacts
    # ------------------------------------------------------------------

    def _shared(self, key: str, factory: Callable[[], object]):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = factory()
            return self._cache[key]

    @property
    def ladder(self) -> Trajectory:
        """Matched (t, j) ladder of the scenario."""
        flow = self.config.flow
        return self._shared("ladder", lambda: self.flow.run_matched_ladder(
            self.plus, self.minus, flow.t_end, flow.ladder_depth))

    @property
    def sweep(self) -> Dict[int, Trajectory]:
        flow = self.config.flow
        return self._shared("sweep", lambda: self.flow.j_sweep(
            self.plus, self.minus, flow.levels, flow.t_end, flow.ladder_depth))

    @property
    def coarse_sweep(self) -> Dict[int, Trajectory]:
        """Same sweep on the n/2 grid; empty when n/2 is below the smallest grid."""
        def run():
            if self.grid.n // 2 < 64:
                return {}
            coarse = TorusGrid(self.grid.n // 2)
            plus, minus = PotentialService(coarse).from_config(self.config)
            flow = self.config.flow
            return FlowService(coarse).j_sweep(plus, minus, flow.levels, flow.t_end, flow.ladder_depth)
        return self._shared("coarse_sweep", run)

    @property
    def normalization(self) -> float:
        return self._shared("c", lambda: self.potentials.normalization_constant(self.plus, self.minus))

    @property
    def limit_u(self) -> ScalarField:
        """psi+ - psi- + c on the nodes, pole nodes as cell means."""
        return self._shared("limit_u", lambda: ScalarField(
            self.grid, self.plus.sample() - self.minus.sample() + self.normalization))

    @property
    def sources(self) -> List[Point]:
        """Pole locations followed by seeded random nodes."""
        def pick():
            poles = [p.location for p in self.plus.poles + self.minus.poles]
            return [self.grid.point_of(*self.grid.node_of(p)) for p in poles] + \
                MetricService(self.grid).random_nodes(4, self.seed)
        return self._shared("sources", pick)

    def prepare(self):
        """Compute the flow artifacts shared by the checks before they fan out."""
        self.ladder
        self.sweep
        self.coarse_sweep

    def all_trajectories(self) -> List[Trajectory]:
        return [self.ladder] + list(self.sweep.values()) + list(self.coarse_sweep.values())

    def _result(self, check_id: str, ok: bool, value: float, tolerance: float, provenance: str,
                detail: str = "", fitted: bool = False, optional: bool = False) -> CheckResult:
        verdict = "fail" if not ok else ("fitted" if fitted else "pass")
        return CheckResult(
            check_id=check_id, scenario=self.scenario, verdict=verdict, value=float(value),
            tolerance=float(tolerance), provenance=provenance, optional=optional, detail=detail,
        )

    # ------------------------------------------------------------------
    # Solver sanity
    # ------------------------------------------------------------------

    def flat_stationarity(self) -> CheckResult:
        """psi+- = 0 keeps u = 0 for all t <= t_end."""
        empty = self.potentials.build([], "plus")
        flow = self.config.flow
        trajectory = FlowService(self.grid).run_flow(
            empty, self.potentials.build([], "minus"), flow.levels[0], flow.t_end, flow.ladder_depth)
        value = max(s.u.sup_norm() for s in trajectory.states)
        tol = settings.stationarity_tolerance
        return self._result("flat_stationarity", value <= tol, value, tol, "exact")

    def linearized_decay(self, epsilon: float = 1e-3,
                         times: Sequence[float] = (0.025, 0.05, 0.1, 0.2)) -> CheckResult:
        """A small cos(2 pi x) mode of u decays like e^{-2 pi t}."""
        flow = FlowService(self.grid)
        x, _ = self.grid.coords()
        phi = ScalarField(self.grid, epsilon * np.cos(TWO_PI * x) / (-TWO_PI))
        trajectory = flow.run_from_state(flow.state_from_potential(phi), list(times))
        n2 = self.grid.n ** 2
        amplitudes = [2.0 * abs(fft.rfft2(s.u.values)[0, 1]) / n2 for s in trajectory.states]
        errors = [
            abs(a / amplitudes[0] / np.exp(-TWO_PI * s.t) - 1.0)
            for a, s in zip(amplitudes[1:], trajectory.states[1:])
        ]
        value = max(errors)
        tol = settings.decay_tolerance
        return self._result("linearized_decay", value <= tol, value, tol, "calibrated",
                            f"amplitude ratios at t={list(times)}")

    # ------------------------------------------------------------------
    # Flow estimates
    # ------------------------------------------------------------------

    def area_conservation(self) -> CheckResult:
        value = max(abs(s.area() - 1.0) for tr in self.all_trajectories() for s in tr.states)
        tol = settings.area_tolerance
        return self._result("area_conservation", value <= tol, value, tol, "exact")

    def maximum_principle(self) -> CheckResult:
        """min phi_0 <= phi_t <= max phi_0 along every fixed-j trajectory."""
        worst = 0.0
        for trajectory in list(self.sweep.values()) + list(self.coarse_sweep.values()):
            phi0 = trajectory.states[0].phi.values
            low, high = phi0.min(), phi0.max()
            for state in trajectory.states[1:]:
                phi = state.phi.values
                worst = max(worst, low - phi.min(), phi.max() - high)
        tol = settings.max_principle_slack
        return self._result("maximum_principle", worst <= tol, worst, tol, "exact")

    def _stable_constant(self, check_id: str, per_run: Dict[str, float], floor: float,
                         detail: str = "", optional: bool = False) -> CheckResult:
        constant = max(per_run.values())
        ratio = drift(list(per_run.values()), floor)
        tol = settings.fitted_drift_factor
        listing = ", ".join(f"{k}={v:.4g}" for k, v in per_run.items())
        return self._result(check_id, ratio <= tol, constant, tol, "fitted",
                            f"drift {ratio:.3f} over {listing} {detail}".strip(),
                            fitted=True, optional=optional)

    def _runs(self) -> Dict[str, Trajectory]:
        runs = {f"n{self.grid.n}_j{j}": tr for j, tr in self.sweep.items()}
        coarse = self.grid.n // 2
        runs.update({f"n{coarse}_j{j}": tr for j, tr in self.coarse_sweep.items()})
        return runs

    def phidot_bounds(self) -> CheckResult:
        """psi+ - C <= u_t <= C - psi-: C = sup B+- stable across j and n."""
        per_run = {
            name: max(max(r.b_plus, r.b_minus) for r in tr.rows)
            for name, tr in self._runs().items()
        }
        return self._stable_constant("phidot_bounds", per_run, floor=1.0)

    def lp_monotonicity(self) -> CheckResult:
        worst = 0.0
        for tr in self._runs().values():
            values = np.array([r.lp_integral for r in tr.rows])
            worst = max(worst, float(np.max((values[1:] - values[:-1]) / values[:-1], initial=0.0)))
        tol = settings.monotonicity_slack
        return self._result("lp_monotonicity", worst <= tol, worst, tol, "exact",
                            f"I_{settings.lp_exponent:g} non-increasing")

    def mass_monotonicity(self) -> CheckResult:
        worst = 0.0
        for tr in self._runs().values():
            values = np.array([r.mass for r in tr.rows])
            scale = np.maximum(1.0, np.abs(values[:-1]))
            worst = max(worst, float(np.max((values[:-1] - values[1:]) / scale, initial=0.0)))
        tol = settings.monotonicity_slack
        return self._result("mass_monotonicity", worst <= tol, worst, tol, "exact")

    def time_concavity(self) -> CheckResult:
        """Second time differences of phi bounded above when psi+ = 0."""
        if self.plus.poles:
            return self._result("time_concavity", True, 0.0, 0.0, "fitted",
                                "not applicable: psi+ carries poles", optional=True)
        per_run = {
            name: max(0.0, max(r.time_concavity for r in tr.rows if r.time_concavity is not None))
            for name, tr in self._runs().items()
            if any(r.time_concavity is not None for r in tr.rows)
        }
        return self._stable_constant("time_concavity", per_run, floor=1.0)

    def gradient_bound(self) -> CheckResult:
        """Gamma(t) <= C e^{Ct} with C stable under refinement (psi+ = 0 only)."""
        if self.plus.poles:
            return self._result("gradient_bound", True, 0.0, 0.0, "fitted",
                                "not applicable: psi+ carries poles", optional=True)
        per_run = {
            name: growth_constant([r.t for r in tr.rows], [r.gradient_ratio for r in tr.rows])
            for name, tr in self._runs().items()
        }
        return self._stable_constant("gradient_bound", per_run, floor=1.0, optional=True)

    def quasi_psh_precondition(self) -> CheckResult:
        """Delta~ psi + A >= 0 off the poles, and |d psi-| <= e^{-alpha psi-} near minus poles."""
        x, y = self.grid.coords()
        nodes = np.stack([x, y], axis=-1)
        worst = 0.0
        for psi in (self.plus, self.minus):
            if not psi.poles and psi.smooth is None:
                continue
            keep = np.ones_like(x, dtype=bool)
            for pole in psi.poles:
                distance = np.linalg.norm(min_image(nodes - np.asarray(pole.location)), axis=-1)
                keep &= distance > settings.pole_disk_cells * self.grid.h
            slack = self.potentials.smooth_laplacian(psi) + self.potentials.quasi_psh_constant(psi)
            worst = max(worst, float(-slack[keep].min()))
        alphas = [self.gradient_exponent(self.minus, i) for i in range(len(self.minus.poles))]
        tol = settings.quasi_psh_slack * max(1.0, self.plus.A, self.minus.A)
        ok = worst <= tol and all(np.isfinite(a) and a > 0.0 for a in alphas)
        detail = "alpha " + ", ".join(f"{a:.3f}" for a in alphas) if alphas else "no minus poles"
        return self._result("quasi_psh_precondition", ok, worst, tol, "stated", detail)

    def gradient_exponent(self, psi: SingularPotential, index: int) -> float:
        """Slope of log|grad psi| against -psi on small circles about a pole."""
        pole = psi.poles[index]
        center = np.asarray(pole.location, dtype=float)
        m = settings.circle_samples
        theta = TWO_PI * np.arange(m) / m
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        radii = np.array([4, 8, 16], dtype=float) * self.grid.h
        logs, heights = [], []
        for r in radii:
            points = center + r * direction
            delta = 1e-4 * r
            gx = (psi(points + [delta, 0.0]) - psi(points - [delta, 0.0])) / (2 * delta)
            gy = (psi(points + [0.0, delta]) - psi(points - [0.0, delta])) / (2 * delta)
            logs.append(np.log(np.hypot(gx, gy).mean()))
            heights.append(-psi(points).mean())
        return float(np.polyfit(heights, logs, 1)[0])

    # ------------------------------------------------------------------
    # Curvature
    # ------------------------------------------------------------------

    def curvature_measure(self, source: Union[FlowState, ScalarField], stencil: str = None) -> CurvatureMeasure:
        """mu = -Delta~ u h^2 per cell (flat background)."""
        u = source.u if isinstance(source, FlowState) else source
        stencil = stencil or settings.flow_stencil
        values = -self.flow.torus.laplacian_values(u.values, stencil) * self.grid.cell_area
        return CurvatureMeasure(grid=u.grid, values=values, total_mass=float(values.sum()))

    def gauss_bonnet(self) -> CheckResult:
        fields = [s for tr in self.all_trajectories() for s in tr.states if s.grid == self.grid]
        measures = [self.curvature_measure(s) for s in fields] + [self.curvature_measure(self.limit_u)]
        value = max(abs(mu.total_mass) for mu in measures)
        tol = settings.gauss_bonnet_tolerance
        return self._result("gauss_bonnet", value <= tol, value, tol, "exact",
                            f"{len(measures)} measures")

    def ricci_table(self, trajectory: Trajectory = None) -> List[Dict[str, float]]:
        """Per ladder time: L1 distance of u_t to the limit and the 8 weak pairing errors."""
        trajectory = trajectory or self.ladder
        x, y = self.grid.coords()
        limit = self.limit_u.values
        targets = []
        tests = []
        for m, l, phase in TEST_MODES:
            chi = np.cos(TWO_PI * (m * x + l * y) + phase)
            lap_chi = -TWO_PI * (m * m + l * l) * chi
            exact = 0.0
            for psi, sign in ((self.plus, 1.0), (self.minus, -1.0)):
                for pole in psi.poles:
                    exact += sign * pole.nu * float(np.cos(TWO_PI * (m * pole.x + l * pole.y) + phase))
                if psi.smooth is not None:
                    exact += sign * self.grid.integrate(psi.smooth * lap_chi)
            tests.append(lap_chi)
            targets.append(exact)
        table = []
        for state in trajectory.states:
            row = {"t": state.t, "level": state.level,
                   "l1": self.grid.integrate(np.abs(state.u.values - limit))}
            for k, (lap_chi, exact) in enumerate(zip(tests, targets)):
                row[f"pairing_{k}"] = abs(self.grid.integrate(state.u.values * lap_chi) - exact)
            table.append(row)
        return table

    def ricci_convergence(self) -> CheckResult:
        """L1 and weak convergence of u_t to psi+ - psi- + c along the matched ladder."""
        table = self.ricci_table()
        noise = settings.weak_pairing_noise
        monotone = True
        worst = 0.0
        for key in table[0]:
            if key in ("t", "level"):
                continue
            ok, drop = non_decreasing([row[key] for row in table], noise)
            monotone &= ok
            worst = max(worst, drop)
        final = table[0]["l1"]
        tol = settings.ricci_l1_threshold
        return self._result("ricci_convergence", monotone and final <= tol, final, tol, "calibrated",
                            f"t={table[0]['t']:.4g} worst non-monotone step {worst:.2e}")

    # ------------------------------------------------------------------
    # Distances
    # ------------------------------------------------------------------

    def _radial_slope(self, metrics: MetricService, field, max_radius: float) -> float:
        pairs = metrics.radial_pairs(0, field.source, max_radius, min_cells=settings.fmm_seed_cells)
        radii = metrics.flat_pair_values([field], pairs)
        values = metrics.pair_values([field], pairs)
        return float(np.polyfit(np.log(radii), np.log(values), 1)[0])

    def cone_cusp_exponents(self) -> CheckResult:
        """Radial log-log slope of d_T about each pole equals 1 +- nu/2."""
        metrics = MetricService(self.grid)
        max_radius = max(0.05, 16 * self.grid.h)
        # a cone of angle 2 pi beta has d_T ~ r^beta along rays
        cones = self.potentials.cone_angles(self.plus, self.minus)
        expected: List[Tuple[Point, float]] = [((c.x, c.y), c.angle / TWO_PI) for c in cones]
        ratios = [self.potentials.annulus_ratio(self.minus, k) for k in range(len(self.minus.poles))]
        if not expected:
            expected = [((0.5, 0.5), 1.0)]
        fields = metrics.dT_distance(self.plus, self.minus, [loc for loc, _ in expected])
        errors = []
        slopes = []
        for field, (_, target) in zip(fields, expected):
            slope = self._radial_slope(metrics, field, max_radius)
            slopes.append(slope)
            errors.append(abs(slope - target))
        value = max(errors)
        tol = settings.exponent_tolerance
        detail = "slopes " + ", ".join(f"{s:.3f}/{t:.3f}" for s, (_, t) in zip(slopes, expected))
        if ratios:
            detail += "; e^{-psi-} annulus ratios " + ", ".join(f"{r:.3f}" for r in ratios)
        integrable = all(r < 1.0 for r in ratios)
        return self._result("cone_cusp_exponents", value <= tol and integrable, value, tol, "calibrated", detail)

    def _sample_pairs(self, metrics: MetricService, sources: Sequence[Point], radial: bool) -> np.ndarray:
        per_source = max(1, self.config.sampling.pairs // len(sources))
        pairs = [metrics.random_pairs(len(sources), per_source, self.seed)]
        if radial:
            for k, source in enumerate(sources):
                pairs.append(metrics.radial_pairs(k, source, 0.5))
        pairs = np.concatenate(pairs)
        # drop source nodes themselves
        nodes = np.array([self.grid.node_of(s) for s in sources])
        at_source = (pairs[:, 1] == nodes[pairs[:, 0], 0]) & (pairs[:, 2] == nodes[pairs[:, 0], 1])
        return pairs[~at_source]

    def equicontinuity(self) -> CheckResult:
        """Hölder envelope d_t <= C d_S^alpha with (C, alpha) drifting little over the ladder."""
        metrics = MetricService(self.grid)
        sources = self.sources
        pairs = self._sample_pairs(metrics, sources, radial=True)
        flat_values = None
        fits = []
        for state in self.ladder.states:
            fields = metrics.lattice_distance(metrics.from_field(state.u, f"t={state.t:.4g}"), sources)
            if flat_values is None:
                flat_values = metrics.flat_pair_values(fields, pairs)
            fits.append(metrics.holder_fit(metrics.pair_values(fields, pairs), flat_values, "upper"))
        exponents = [f.exponent for f in fits]
        constants = [f.constant for f in fits]
        value = max(drift(exponents) - 1.0, drift(constants) - 1.0)
        tol = settings.equicontinuity_drift
        return self._result("equicontinuity", value <= tol, value, tol, "fitted",
                            f"alpha in [{min(exponents):.3f}, {max(exponents):.3f}], "
                            f"C in [{min(constants):.3f}, {max(constants):.3f}]", fitted=True)

    def diameter_bound(self) -> CheckResult:
        """diam(X, d_t) bounded uniformly in t and j."""
        per_run = {}
        for name, trajectory in self._runs().items():
            grid = trajectory.states[0].grid
            metrics = MetricService(grid)
            sources = metrics.random_nodes(4, self.seed)
            per_run[name] = max(
                metrics.diameter(metrics.lattice_distance(metrics.from_field(s.u), sources))
                for s in trajectory.states[::2]
            )
        return self._stable_constant("diameter_bound", per_run, floor=0.0)

    def flow_metric_table(self, states: Sequence[FlowState] = None) -> List[Tuple[float, float]]:
        """(t, sup over pairs |d_t - d_T|) along the ladder, eikonal on both sides."""
        metrics = MetricService(self.grid)
        sources = self.sources
        states = states if states is not None else self.ladder.states[::2]
        pairs = metrics.random_pairs(len(sources), max(1, 50 // len(sources)), self.seed)
        poles = self.plus.poles + self.minus.poles
        if poles:
            anchored = metrics.radial_pairs(0, sources[0], 0.25)
            pick = np.linspace(0, len(anchored) - 1, min(10, len(anchored))).astype(int)
            pairs = np.concatenate([pairs, anchored[pick]])
        else:
            pairs = np.concatenate([pairs, metrics.random_pairs(len(sources), 10 // len(sources) + 1, self.seed + 1)])
        limit = metrics.dT_distance(self.plus, self.minus, sources)
        table = []
        for state in states:
            fields = metrics.eikonal_distance(metrics.from_field(state.u, f"t={state.t:.4g}"), sources)
            table.append((state.t, metrics.sup_discrepancy(fields, limit, pairs)))
        return table

    def flow_metric_convergence(self) -> CheckResult:
        table = self.flow_metric_table()
        noise = settings.eikonal_flat_error_cells * self.grid.h
        monotone, drop = non_decreasing([d for _, d in table], noise)
        final = table[0][1]
        tol = settings.metric_convergence_fraction * FLAT_DIAMETER
        detail = "; ".join(f"t={t:.4g}: {d:.4g}" for t, d in table)
        return self._result("flow_metric_convergence", monotone and final <= tol, final, tol,
                            "calibrated", detail)

    def smooth_test_metric(self, amplitude: float = 1.0, modes: int = 4) -> ScalarField:
        """Seeded band-limited field with sup norm equal to amplitude."""
        rng = np.random.default_rng(self.seed)
        x, y = self.grid.coords()
        values = np.zeros_like(x)
        for m in range(-modes, modes + 1):
            for l in range(-modes, modes + 1):
                if m == 0 and l == 0:
                    continue
                a, phase = rng.normal(), rng.uniform(0.0, TWO_PI)
                values += a / (1.0 + m * m + l * l) * np.cos(TWO_PI * (m * x + l * y) + phase)
        return ScalarField(self.grid, amplitude * values / np.abs(values).max())

    def cross_validate(self, m: ConformalMetric, sources: Sequence[Point]) -> float:
        """Relative sup difference between lattice and eikonal distance fields."""
        metrics = MetricService(self.grid)
        lattice = metrics.lattice_distance(m, sources)
        eikonal = metrics.eikonal_distance(m, sources)
        scale = max(f.values.max() for f in lattice)
        return metrics.sup_discrepancy(lattice, eikonal) / scale

    def method_cross_validation(self) -> CheckResult:
        metrics = MetricService(self.grid)
        sources = metrics.random_nodes(3, self.seed)
        tested = {
            "band-limited": metrics.from_field(self.smooth_test_metric(), "band-limited"),
            "flow t_end": metrics.from_field(self.ladder.states[-1].u, "flow t_end"),
        }
        values = {name: self.cross_validate(m, sources) for name, m in tested.items()}
        value = max(values.values())
        detail = ", ".join(f"{k}={v:.4f}" for k, v in values.items())
        if value > settings.cross_validation_tolerance:
            log(f"⚠️ Lattice and eikonal distances differ by {value:.2%} (target {settings.cross_validation_tolerance:.0%})")
            detail += " above target"
        tol = settings.cross_validation_failure
        return self._result("method_cross_validation", value <= tol, value, tol, "calibrated", detail)

    # ------------------------------------------------------------------
    # Curve integrability and the density lemma
    # ------------------------------------------------------------------

    def check_curve_integrability(self, psi: SingularPotential, s: float,
                                  lengths: Sequence[float] = None,
                                  offsets: Sequence[float] = None) -> ScalingFit:
        """Integrals of e^{-psi/s} over segments of length L near the pole, slope in L per offset."""
        if len(psi.poles) > 1:
            raise ValueError("curve integrability needs a potential with at most one pole")
        nu_eff = psi.max_nu / s if psi.poles else 0.0
        if nu_eff >= 1.0:
            raise ValueError(f"outside the integrability range: nu/s = {nu_eff:.3f} >= 1")
        h = self.grid.h
        lengths = tuple(lengths or [0.25 * 2.0 ** -k for k in range(5)])
        offsets = tuple(offsets if offsets is not None else (0.0, h, 4 * h))
        metrics = MetricService(self.grid)
        m = self.integrability_metric(psi, s)
        a = np.asarray(psi.poles[0].location if psi.poles else (0.5, 0.5), dtype=float)
        integrals = np.zeros((len(offsets), len(lengths)))
        for i, offset in enumerate(offsets):
            for k, length in enumerate(lengths):
                if offset == 0.0:
                    half = np.array([length / 2.0, 0.0])
                    integrals[i, k] = metrics.segment_length(m, a, half) + metrics.segment_length(m, a, -half)
                else:
                    start = a + np.array([-length / 2.0, offset])
                    integrals[i, k] = metrics.segment_length(m, start, [length, 0.0])
        slopes = tuple(float(np.polyfit(np.log(lengths), np.log(row), 1)[0]) for row in integrals)
        return ScalingFit(nu_eff=nu_eff, lengths=lengths, offsets=offsets, integrals=integrals, slopes=slopes)

    def integrability_metric(self, psi: SingularPotential, s: float) -> ConformalMetric:
        """Length element e^{-psi/s}, i.e. log-factor -2 psi / s."""
        poles = tuple(
            MetricPole(location=p.location, exponent=-p.nu / s,
                       coefficient=float(np.exp(-psi.regular_value(i) / s)))
            for i, p in enumerate(psi.poles)
        )
        return ConformalMetric(grid=self.grid, tag=f"exp(-psi/{s:g})",
                               log_factor_fn=lambda points: -2.0 * psi(points) / s, poles=poles)

    def brute_force_integral(self, psi: SingularPotential, s: float, start, length: float,
                             samples: int = 1_000_000) -> float:
        """Trapezoid rule on a horizontal segment with exact potential values."""
        x = np.linspace(0.0, length, samples)
        points = np.asarray(start, dtype=float) + np.stack([x, np.zeros_like(x)], axis=-1)
        return float(trapezoid(np.exp(-psi(points) / s), x))

    def curve_integrability(self, nu: float = 1.2, s: float = 2.0) -> CheckResult:
        psi = self.potentials.build([PoleSpec(x=0.5, y=0.5, nu=nu, sign="minus")], "minus")
        fit = self.check_curve_integrability(psi, s)
        bound = 1.0 - fit.nu_eff - settings.exponent_tolerance
        a = np.asarray(psi.poles[0].location)
        worst = 0.0
        i = len(fit.offsets) - 1
        for k, length in enumerate(fit.lengths):
            start = a + np.array([-length / 2.0, fit.offsets[i]])
            brute = self.brute_force_integral(psi, s, start, length)
            worst = max(worst, abs(brute - fit.integrals[i, k]) / brute)
        ok = fit.min_slope >= bound and worst <= 1e-4
        detail = "slopes " + ", ".join(f"{v:.3f}" for v in fit.slopes) + f"; brute-force rel diff {worst:.1e}"
        return self._result("curve_integrability", ok, fit.min_slope, bound, "stated", detail)

    @staticmethod
    def _arc_samples(gamma: Polyline, step: float) -> Tuple[np.ndarray, float]:
        """Midpoint samples of an arc-length polyline (unwrapped) and their spacing."""
        if not gamma.arc_length:
            raise ValueError("density lemma needs an arc-length parametrized curve")
        steps = Polyline.steps_of(gamma.points)
        lengths = np.hypot(steps[:, 0], steps[:, 1])
        if not np.allclose(lengths, lengths[0], rtol=1e-9, atol=0.0):
            raise ValueError("curve is not arc-length parametrized: segment lengths vary")
        unwrapped = gamma.points[0] + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        arc = np.concatenate([[0.0], np.cumsum(lengths)])
        total = arc[-1]
        count = int(np.ceil(total / step))
        spacing = total / count
        s = (np.arange(count) + 0.5) * spacing
        points = np.stack([np.interp(s, arc, unwrapped[:, 0]), np.interp(s, arc, unwrapped[:, 1])], axis=-1)
        return points, spacing

    @staticmethod
    def _disk_time(samples: np.ndarray, spacing: float, zeta: Point, rho: float) -> float:
        offsets = min_image(samples - np.asarray(zeta, dtype=float))
        inside = np.hypot(offsets[:, 0], offsets[:, 1]) <= rho * (1.0 + 1e-12)
        return float(inside.sum() * spacing)

    def check_density_lemma(self, gamma: Polyline, zeta: Point, rho: float) -> Tuple[float, float, bool]:
        """Time spent by gamma in the disk (zeta, rho) against min(L, 8 rho): (measure, bound, ok)."""
        samples, spacing = self._arc_samples(gamma, self.grid.h / 8.0)
        measure = self._disk_time(samples, spacing, zeta, rho)
        bound = min(gamma.length, 8.0 * rho)
        return measure, bound, measure <= bound * (1.0 + settings.density_lemma_slack) + spacing

    def random_curve(self, rng: np.random.Generator) -> Polyline:
        """Arc-length polyline with band-limited heading of oscillation below pi/3."""
        step = self.grid.h / 8.0
        length = rng.uniform(0.05, 0.5)
        count = int(np.ceil(length / step))
        s = np.arange(count) * step / length
        weights = rng.dirichlet(np.ones(3)) * (np.pi / 6.0) * 0.99
        heading = rng.uniform(0.0, TWO_PI) + sum(
            w * np.sin(TWO_PI * (k + 1) * s + rng.uniform(0.0, TWO_PI)) for k, w in enumerate(weights)
        )
        steps = step * np.stack([np.cos(heading), np.sin(heading)], axis=-1)
        start = rng.uniform(0.0, 1.0, size=2)
        points = start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        return Polyline(points=points, arc_length=True)

    def density_audit(self, curves: int = 200, disks: int = 50) -> Tuple[int, float]:
        """(violations, worst measure/bound ratio) over random curves and disks."""
        rng = np.random.default_rng(self.seed)
        violations = 0
        worst = 0.0
        for _ in range(curves):
            gamma = self.random_curve(rng)
            samples, spacing = self._arc_samples(gamma, self.grid.h / 8.0)
            for _ in range(disks):
                rho = rng.uniform(self.grid.h, 0.2)
                angle, radius = rng.uniform(0.0, TWO_PI), rho * np.sqrt(rng.uniform())
                zeta = samples[rng.integers(len(samples))] + radius * np.array([np.cos(angle), np.sin(angle)])
                measure = self._disk_time(samples, spacing, zeta, rho)
                bound = min(gamma.length, 8.0 * rho)
                worst = max(worst, measure / bound)
                if measure > bound * (1.0 + settings.density_lemma_slack) + spacing:
                    violations += 1
        return violations, worst

    def density_lemma(self) -> CheckResult:
        violations, worst = self.density_audit()
        return self._result("density_lemma", violations == 0, worst, 1.0 + settings.density_lemma_slack,
                            "stated", f"{violations} violations over 200 curves x 50 disks")

    # ------------------------------------------------------------------
    # Counterexample
    # ------------------------------------------------------------------

    def counterexample_run(self, levels: Sequence[int] = None) -> EstimateReport:
        """Weak convergence e^{psi_j} -> 1 together with d_j -> d_S / 2."""
        levels = levels or self.config.checks.counterexample_levels
        metrics = MetricService(self.grid)
        sources = metrics.random_nodes(8, self.seed)
        pairs = metrics.random_pairs(len(sources), 25, self.seed)
        checks = []
        for j in levels:
            density = self.potentials.counterexample_density(j)
            spacing = density.spacing
            m = metrics.from_callable(density, f"net-{j}", chords=density.chords)
            fields = metrics.lattice_distance(m, sources)
            d_j = metrics.pair_values(fields, pairs)
            d_s = metrics.flat_pair_values(fields, pairs)

            tol = settings.counterexample_l1_slack * spacing
            checks.append(self._result(
                f"counterexample_j{j}_weak", density.l1_deviation <= tol, density.l1_deviation, tol,
                "stated", "int |e^psi_j - 1|"))

            gap = float(np.abs(d_j - d_s / 2.0).max())
            below = float(np.max(d_s / 2.0 - d_j))
            tol = 5.0 * spacing + 2.0 * self.grid.h
            checks.append(self._result(
                f"counterexample_j{j}_metric", gap <= tol and below <= 1e-12, gap, tol, "stated",
                f"sup |d_j - d_S/2|; min(d_j - d_S/2) = {-below:.3e}"))

            wide = d_s >= 0.25
            separation = float(np.abs(d_j[wide] - d_s[wide]).max()) if wide.any() else 0.0
            floor = 0.4 * float(d_s[wide].max()) / 2.0 if wide.any() else 0.0
            checks.append(self._result(
                f"counterexample_j{j}_gap", wide.any() and separation >= floor, separation, floor,
                "stated", f"sup |d_j - d_S| on {int(wide.sum())} diameter-order pairs, "
                f"{len(density.directions)} net directions"))
            log(f"🧪 Counterexample j={j}: L1 {density.l1_deviation:.4g}, sup|d_j - d_S/2| {gap:.4g}")
        return EstimateReport(scenario=self.scenario, checks=checks)

    # ------------------------------------------------------------------
    # Battery
    # ------------------------------------------------------------------

    def selected(self) -> List[str]:
        names = self.config.checks.names
        return list(self.checks) + ["counterexample"] if names == "all" else list(names)

    def _guarded(self, name: str) -> List[CheckResult]:
        try:
            if name == "counterexample":
                return self.counterexample_run().checks
            return [self.checks[name]()]
        except Exception as e:
            log(f"❌ Check {name} failed: {e}")
            if not settings.quiet:
                traceback.print_exc()
            return [CheckResult(check_id=name, scenario=self.scenario, verdict="fail", value=float("nan"),
                                tolerance=float("nan"), provenance="error", detail=str(e))]

    def battery(self) -> EstimateReport:
        """Run the selected checks concurrently and assemble the report."""
        names = self.selected()
        log(f"🧪 Verifying scenario {self.scenario}: {len(names)} checks on n={self.grid.n}")
        needs_flow = {"area_conservation", "maximum_principle", "phidot_bounds", "lp_monotonicity",
                      "mass_monotonicity", "time_concavity", "equicontinuity", "ricci_convergence",
                      "gauss_bonnet", "flow_metric_convergence", "method_cross_validation",
                      "gradient_bound", "diameter_bound"}
        if needs_flow & set(names):
            self.prepare()
        with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
            results = list(pool.map(self._guarded, names))
        checks = [c for group in results for c in group]
        rows = self.ladder.rows if "ladder" in self._cache else []
        report = EstimateReport(scenario=self.scenario, rows=rows, checks=checks)
        glyph = "✅" if report.passed(settings.strict) else "❌"
        log(f"{glyph} Scenario {self.scenario}: {len(report.failures(settings.strict))} failing of {len(checks)}")
        return report


