#!/usr/bin/env python3
"""
Flow Service
Backward-Euler integration of d/dt phi = log(1 + Delta~ phi) from truncated
singular data, geometric time ladders and per-state diagnostics.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from krflow.config import log, settings
from krflow.models import DiagnosticRow, FlowState, ScalarField, TorusGrid, Trajectory
from krflow.services.potential_service import PotentialService, SingularPotential
from krflow.services.torus_service import TorusService


def matched_level(k: int) -> int:
    """Truncation level paired with ladder index k: j(k) = 4 + floor(k/2) * 2."""
    return 4 + (k // 2) * 2


def ladder_times(t_end: float, depth: int) -> List[float]:
    """t_end * 2^-k for k = depth..0, ascending."""
    return [t_end * 2.0 ** -k for k in range(depth, -1, -1)]


class FlowService:
    def __init__(self, grid: TorusGrid):
        """Initialize flow service with the configured Laplacian stencil"""
        self.grid = grid
        self.torus = TorusService(grid)
        self.potentials = PotentialService(grid)
        self.stencil = settings.flow_stencil
        self.symbol = self.torus.symbol(self.stencil)
        self.steps_taken = 0

    def lap(self, values: np.ndarray) -> np.ndarray:
        return self.torus.laplacian_values(values, self.stencil)

    # ------------------------------------------------------------------
    # States
    # ------------------------------------------------------------------

    def truncated_pair(self, plus: SingularPotential, minus: SingularPotential,
                       j: int) -> Tuple[ScalarField, ScalarField]:
        return self.potentials.truncate(plus, j), self.potentials.truncate(minus, j)

    def init_state(self, plus: SingularPotential, minus: SingularPotential, j: int) -> FlowState:
        """Solve Delta~ phi_0 = e^{psi+^(j) - psi-^(j) + c_j} - 1 for the mean-zero phi_0.

        c_j normalizes the grid sum of the truncated density, so the right-hand side has
        mean zero to rounding; it tends to normalization_constant(plus, minus) as j and n grow.
        """
        self.potentials.check_no_cusp(minus)
        p, m = self.truncated_pair(plus, minus, j)
        w = p.values - m.values
        c = self.potentials.normalization_constant_grid(w)
        u0 = w + c
        density = np.exp(u0)
        rhs = density - density.mean()
        phi0 = self.torus.solve_poisson(ScalarField(self.grid, rhs), stencil=self.stencil)
        return FlowState(t=0.0, phi=phi0, u=ScalarField(self.grid, u0), level=j)

    def state_from_potential(self, phi: ScalarField, t: float = 0.0, level: int = 0) -> FlowState:
        """Coherent state u = log(1 + Delta~ phi) for a given potential."""
        rho = 1.0 + self.lap(phi.values)
        if rho.min() <= 0.0:
            raise ValueError(f"1 + Laplacian(phi) must be positive, min is {rho.min():.3e}")
        return FlowState(t=t, phi=phi, u=ScalarField(self.grid, np.log(rho)), level=level)

    def coherence(self, state: FlowState) -> float:
        """sup |u - log(1 + Delta~ phi)|."""
        rho = 1.0 + self.lap(state.phi.values)
        return float(np.abs(state.u.values - np.log(rho)).max())

    # ------------------------------------------------------------------
    # Time stepping
    # ------------------------------------------------------------------

    def _implicit_solve(self, phi_old: np.ndarray, u_old: np.ndarray, dt: float) -> Optional[np.ndarray]:
        """Newton iteration for phi = phi_old + dt log(1 + L phi); None on failure."""
        n = self.grid.n
        size = n * n
        phi = phi_old + dt * u_old
        preconditioner_symbol = 1.0 / (1.0 - dt * self.symbol)
        precondition = LinearOperator(
            (size, size),
            matvec=lambda v: self.torus.apply_multiplier(v.reshape(n, n), preconditioner_symbol).ravel(),
            dtype=float,
        )
        for _ in range(settings.newton_max_iter):
            rho = 1.0 + self.lap(phi)
            if rho.min() <= 0.0:
                return None
            residual = phi - phi_old - dt * np.log(rho)
            # rho * Jacobian = rho I - dt L is symmetric positive definite
            operator = LinearOperator(
                (size, size),
                matvec=lambda v, rho=rho: (rho * v.reshape(n, n) - dt * self.lap(v.reshape(n, n))).ravel(),
                dtype=float,
            )
            rhs = (-rho * residual).ravel()
            atol = 1e-3 * settings.newton_tol * float(rho.min())
            delta, info = cg(operator, rhs, rtol=settings.cg_rtol, atol=atol,
                             maxiter=settings.cg_maxiter, M=precondition)
            if info < 0 or not np.all(np.isfinite(delta)):
                return None
            delta = delta.reshape(n, n)
            damping = 1.0
            for _ in range(30):
                trial = phi + damping * delta
                if (1.0 + self.lap(trial)).min() > 0.0:
                    break
                damping *= 0.5
            else:
                return None
            phi = trial
            if damping == 1.0 and np.abs(delta).max() <= settings.newton_tol:
                return phi
        return None

    def step(self, state: FlowState, dt: float) -> FlowState:
        """One backward-Euler step; dt is halved on Newton failure (the returned t reflects it)."""
        if dt <= 0.0:
            raise ValueError(f"time step must be positive, got {dt}")
        return self._step_to(state, state.t + dt)

    def _step_to(self, state: FlowState, t_new: float) -> FlowState:
        dt = t_new - state.t
        for _ in range(settings.max_halvings + 1):
            phi = self._implicit_solve(state.phi.values, state.u.values, dt)
            if phi is not None:
                self.steps_taken += 1
                phi_field = ScalarField(self.grid, phi)
                u = np.log(1.0 + self.lap(phi))
                return FlowState(t=t_new, phi=phi_field, u=ScalarField(self.grid, u), level=state.level)
            dt /= 2.0
            t_new = state.t + dt
        raise RuntimeError(f"stiff step: Newton failed at t={state.t:.6g} with dt={dt * 2.0:.3e}")

    def initial_dt(self, state: FlowState) -> float:
        return min(1e-4, self.grid.h ** 2 * np.pi * float(np.exp(state.u.values).min()))

    def advance(self, state: FlowState, t_target: float, dt: float) -> Tuple[FlowState, float]:
        """Integrate to exactly t_target with adaptive dt; returns the state and the next dt."""
        while state.t < t_target:
            remaining = t_target - state.t
            if remaining <= 1e-15 * max(1.0, t_target):
                break
            landing = dt >= remaining
            target = t_target if landing else state.t + dt
            new = self._step_to(state, target)
            if new.t < target:
                dt = new.t - state.t
            else:
                dt = min(dt * settings.dt_growth, settings.dt_max)
            state = new
        if state.t != t_target:
            state = FlowState(t=t_target, phi=state.phi, u=state.u, level=state.level)
        return state, dt

    def run_from_state(self, state: FlowState, times: Sequence[float],
                       truncated: Tuple[ScalarField, ScalarField] = None) -> Trajectory:
        """Trajectory holding `state` and the states at the requested ascending times."""
        states = [state]
        dt = self.initial_dt(state)
        for t in times:
            if t <= states[-1].t:
                raise ValueError(f"ladder times must increase past t={states[-1].t}, got {t}")
            try:
                current, dt = self.advance(states[-1], t, dt)
            except RuntimeError as e:
                raise RuntimeError(f"{e} (level j={state.level}, heading for ladder time {t:.6g})") from e
            states.append(current)
        rows = []
        if truncated is not None:
            for k, current in enumerate(states):
                neighbours = (states[k - 1], states[k + 1]) if 0 < k < len(states) - 1 else None
                rows.append(self.diagnostics(current, truncated[0], truncated[1], neighbours))
        return Trajectory(states=states, rows=rows)

    def run_flow(self, plus: SingularPotential, minus: SingularPotential, j: int,
                 t_end: float = 1.0, ladder_depth: int = 10) -> Trajectory:
        """Approximating flow at truncation level j, sampled on the ladder t_end 2^-k."""
        if not 0.0 < t_end <= 1.0:
            raise ValueError(f"t_end must lie in (0, 1], got {t_end}")
        log(f"🔄 Flow j={j}: n={self.grid.n}, t_end={t_end}, {ladder_depth + 1} ladder times")
        start_steps = self.steps_taken
        state = self.init_state(plus, minus, j)
        truncated = self.truncated_pair(plus, minus, j)
        trajectory = self.run_from_state(state, ladder_times(t_end, ladder_depth), truncated)
        log(f"✅ Flow j={j} reached t={t_end} in {self.steps_taken - start_steps} steps")
        return trajectory

    def run_matched_ladder(self, plus: SingularPotential, minus: SingularPotential,
                           t_end: float = 1.0, depth: int = 10) -> Trajectory:
        """States at t_k = t_end 2^-k from the flow with truncation j(k)."""
        groups: Dict[int, List[float]] = {}
        for k in range(depth, -1, -1):
            groups.setdefault(matched_level(k), []).append(t_end * 2.0 ** -k)
        states: List[FlowState] = []
        rows: List[DiagnosticRow] = []
        for j, times in sorted(groups.items()):
            truncated = self.truncated_pair(plus, minus, j)
            trajectory = self.run_from_state(self.init_state(plus, minus, j), sorted(times), truncated)
            states.extend(trajectory.states[1:])
            rows.extend(trajectory.rows[1:])
        order = np.argsort([s.t for s in states])
        log(f"✅ Matched ladder: levels {sorted(groups)} over {len(states)} times")
        return Trajectory(states=[states[i] for i in order], rows=[rows[i] for i in order])

    def j_sweep(self, plus: SingularPotential, minus: SingularPotential, levels: Sequence[int],
                t_end: float = 1.0, depth: int = 10) -> Dict[int, Trajectory]:
        """One trajectory per truncation level, levels run concurrently."""
        workers = max(1, min(settings.threads, len(levels)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                j: pool.submit(FlowService(self.grid).run_flow, plus, minus, j, t_end, depth)
                for j in levels
            }
            return {j: futures[j].result() for j in levels}

    # ------------------------------------------------------------------
    # Diagnostics
    # ------------------------------------------------------------------

    def diagnostics(self, state: FlowState, plus_j: ScalarField, minus_j: ScalarField,
                    neighbours: Tuple[FlowState, FlowState] = None) -> DiagnosticRow:
        """Row of bound quantities for one ladder state."""
        u = state.u.values
        phi = state.phi.values
        density = np.exp(u)
        fx, fy = self.torus.gradient(state.u)
        gamma = settings.gradient_gamma
        concavity = None
        if neighbours is not None:
            before, after = neighbours
            slope_before = (phi - before.phi.values) / (state.t - before.t)
            slope_after = (after.phi.values - phi) / (after.t - state.t)
            concavity = float((2.0 * (slope_after - slope_before) / (after.t - before.t)).max())
        return DiagnosticRow(
            t=state.t,
            level=state.level,
            phi_min=float(phi.min()),
            phi_max=float(phi.max()),
            area_error=self.grid.integrate(density) - 1.0,
            mass=self.grid.integrate(u),
            lp_integral=self.grid.integrate(density ** settings.lp_exponent),
            b_plus=float((plus_j.values - u).max()),
            b_minus=float((u + minus_j.values).max()),
            time_concavity=concavity,
            gradient_ratio=float((np.hypot(fx, fy) * np.exp(gamma * minus_j.values)).max()),
        )
