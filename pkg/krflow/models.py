from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

Point = Tuple[float, float]


# ---------------------------------------------------------------------------
# Numeric carriers (hold numpy arrays, immutable after construction)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TorusGrid:
    """Periodic n x n discretization of the unit square torus C/(Z+iZ)."""
    n: int

    def __post_init__(self):
        if self.n < 64 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two >= 64, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Node coordinates (x, y), arrays indexed [iy, ix]."""
        axis = np.arange(self.n) * self.h
        x, y = np.meshgrid(axis, axis, indexing="xy")
        return x, y

    def node_of(self, point: Point) -> Tuple[int, int]:
        """Nearest node (iy, ix) of a point of the fundamental domain."""
        ix = int(np.rint(point[0] * self.n)) % self.n
        iy = int(np.rint(point[1] * self.n)) % self.n
        return iy, ix

    def point_of(self, iy: int, ix: int) -> Point:
        return ((ix % self.n) * self.h, (iy % self.n) * self.h)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.cell_area)


@dataclass(frozen=True)
class ScalarField:
    grid: TorusGrid
    values: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"field shape {values.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar fields must be finite at every node")
        if self.mean_zero and abs(values.mean()) > 1e-12 * max(1.0, np.abs(values).max()):
            raise ValueError(f"mean-zero flag set but mean is {values.mean():.3e}")
        object.__setattr__(self, "values", values)

    def mean(self) -> float:
        return float(self.values.mean())

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def shifted(self, shift: int, axis: int) -> "ScalarField":
        return ScalarField(self.grid, np.roll(self.values, shift, axis=axis), self.mean_zero)

    def __add__(self, other: Union["ScalarField", float]) -> "ScalarField":
        other_values = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values + other_values)

    def __sub__(self, other: Union["ScalarField", float]) -> "ScalarField":
        other_values = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values - other_values)

    def scaled(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, factor * self.values, self.mean_zero)


@dataclass(frozen=True)
class FlowState:
    """Snapshot of the flow: potential phi_t and log-density u_t = dphi/dt."""
    t: float
    phi: ScalarField
    u: ScalarField
    level: int

    @property
    def grid(self) -> TorusGrid:
        return self.phi.grid

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.u.values)

    def area(self) -> float:
        return self.grid.integrate(self.density)


@dataclass(frozen=True)
class Polyline:
    """Ordered points of the torus; each segment follows the shortest translate."""
    points: np.ndarray
    arc_length: bool = False

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise ValueError("a polyline needs at least two 2d points")
        steps = self.steps_of(points)
        if np.any(np.hypot(steps[:, 0], steps[:, 1]) == 0.0):
            raise ValueError("consecutive polyline points must be distinct")
        object.__setattr__(self, "points", np.mod(points, 1.0))

    @staticmethod
    def steps_of(points: np.ndarray) -> np.ndarray:
        steps = np.diff(points, axis=0)
        return steps - np.rint(steps)

    def segments(self) -> np.ndarray:
        """(start, displacement) pairs of shape (m, 2, 2)."""
        steps = self.steps_of(self.points)
        return np.stack([self.points[:-1], steps], axis=1)

    @property
    def length(self) -> float:
        steps = self.steps_of(self.points)
        return float(np.hypot(steps[:, 0], steps[:, 1]).sum())


@dataclass(frozen=True)
class DistanceField:
    source: Point
    values: np.ndarray
    grid: TorusGrid
    metric_tag: str
    method: Literal["lattice-oracle", "eikonal"]

    def at(self, iy: int, ix: int) -> float:
        return float(self.values[iy % self.grid.n, ix % self.grid.n])


@dataclass(frozen=True)
class CurvatureMeasure:
    """Signed cell measure -Lap(u) h^2 (flat background, kappa = 0)."""
    grid: TorusGrid
    values: np.ndarray
    total_mass: float

    def mass_in_disk(self, center: Point, radius: float) -> Tuple[float, float]:
        """Measure of the cells within radius of center, and their flat area."""
        x, y = self.grid.coords()
        dx = x - center[0]
        dy = y - center[1]
        dx -= np.rint(dx)
        dy -= np.rint(dy)
        inside = np.hypot(dx, dy) <= radius
        return float(self.values[inside].sum()), float(inside.sum() * self.grid.cell_area)


@dataclass(frozen=True)
class Trajectory:
    states: List[FlowState]
    rows: List["DiagnosticRow"] = field(default_factory=list)

    def __post_init__(self):
        times = [state.t for state in self.states]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def times(self) -> List[float]:
        return [state.t for state in self.states]

    def state_at(self, t: float) -> FlowState:
        for state in self.states:
            if abs(state.t - t) <= 1e-12 * max(1.0, t):
                return state
        raise ValueError(f"time {t} not on ladder; available: {self.times}")


# ---------------------------------------------------------------------------
# Validated / serialized models
# ---------------------------------------------------------------------------

class PoleSpec(BaseModel):
    x: float = Field(ge=0.0, lt=1.0)
    y: float = Field(ge=0.0, lt=1.0)
    nu: float = Field(gt=0.0)
    sign: Literal["plus", "minus"]

    @property
    def location(self) -> Point:
        return (self.x, self.y)


class GridSection(BaseModel):
    n: int


class FlowSection(BaseModel):
    t_end: float = Field(default=1.0, gt=0.0, le=1.0)
    ladder_depth: int = Field(default=10, ge=1, le=16)
    levels: List[int] = Field(default_factory=lambda: [4, 6, 8])

    @field_validator("levels")
    @classmethod
    def positive_levels(cls, levels: List[int]) -> List[int]:
        if not levels or any(level <= 0 for level in levels):
            raise ValueError("truncation levels must be positive integers")
        return sorted(set(levels))


class ChecksSection(BaseModel):
    names: Union[Literal["all"], List[str]] = "all"
    counterexample_levels: List[int] = Field(default_factory=lambda: [2, 3, 4, 5])


class SamplingSection(BaseModel):
    seed: int = 20240917
    pairs: int = Field(default=50, ge=20)


class OutputSection(BaseModel):
    directory: str = "krflow_out"


class ScenarioConfig(BaseModel):
    grid: GridSection
    flow: FlowSection = Field(default_factory=FlowSection)
    checks: ChecksSection = Field(default_factory=ChecksSection)
    sampling: SamplingSection = Field(default_factory=SamplingSection)
    output: OutputSection = Field(default_factory=OutputSection)
    pole: List[PoleSpec] = Field(default_factory=list)

    def poles_of(self, sign: str) -> List[PoleSpec]:
        return [p for p in self.pole if p.sign == sign]


class DiagnosticRow(BaseModel):
    t: float
    level: int
    phi_min: float
    phi_max: float
    area_error: float
    mass: float
    lp_integral: float
    b_plus: float
    b_minus: float
    time_concavity: Optional[float] = None
    gradient_ratio: float


class HolderFit(BaseModel):
    exponent: float
    constant: float
    residual: float
    direction: Literal["upper", "lower"]
    pairs: int
    slope: Optional[float] = None

    @field_validator("exponent")
    @classmethod
    def exponent_in_range(cls, exponent: float) -> float:
        if not 0.0 < exponent < 3.0:
            raise ValueError(f"fitted exponent {exponent:.4f} outside (0, 3)")
        return exponent


class CheckResult(BaseModel):
    check_id: str
    scenario: str
    verdict: Literal["pass", "fail", "fitted"]
    value: float
    tolerance: float
    provenance: str
    optional: bool = False
    detail: str = ""


class EstimateReport(BaseModel):
    scenario: str
    rows: List[DiagnosticRow] = Field(default_factory=list)
    checks: List[CheckResult] = Field(default_factory=list)

    def failures(self, strict: bool = False) -> List[CheckResult]:
        return [
            c for c in self.checks
            if c.verdict == "fail" and (strict or not c.optional)
        ]

    def passed(self, strict: bool = False) -> bool:
        return not self.failures(strict)

    def summary(self) -> str:
        lines = [f"Scenario: {self.scenario}"]
        for c in self.checks:
            glyph = {"pass": "✅", "fail": "❌", "fitted": "📐"}[c.verdict]
            optional = " (optional)" if c.optional else ""
            lines.append(
                f"{glyph} {c.check_id}{optional}: value={c.value:.6g} "
                f"tol={c.tolerance:.3g} [{c.provenance}] {c.detail}".rstrip()
            )
        status = "PASS" if self.passed() else "FAIL"
        lines.append(f"Overall: {status} ({len(self.checks)} checks)")
        return "\n".join(lines)


class Manifest(BaseModel):
    config_hash: str
    seed: int
    files: List[str] = Field(default_factory=list)
    versions: Dict[str, str] = Field(default_factory=dict)
    created: str


class ConePoint(BaseModel):
    """Cone angle and curvature mass carried by one pole of e^{psi+ - psi-}|dz|^2."""
    x: float
    y: float
    sign: Literal["plus", "minus"]
    nu: float
    angle: float
    curvature_mass: float
    cusp: bool
