import json
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Optional, Tuple, Union

from cryptography.hazmat.primitives import hashes
from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from krflow.models import ScenarioConfig


class Settings(BaseSettings):
    # Runtime
    threads: int = 1
    output_dir: str = "./krflow_out"
    seed: int = 20240917
    strict: bool = False
    quiet: bool = False

    # Potentials and Green function
    softmax_stiffness: float = 4.0
    pole_disk_cells: int = 4
    pole_disk_radius: float = 1.0 / 16.0   # floor for the polar quadrature disk
    pole_min_separation_cells: int = 8
    lelong_radii_cells: List[int] = [4, 8, 16, 32]
    circle_samples: int = 128
    green_cutoff_inner: float = 0.125
    green_cutoff_outer: float = 0.25
    green_interpolation_order: int = 3     # smooth part of G_a: 1 bilinear, 3 cubic
    polar_radial_nodes: int = 32
    polar_angular_nodes: int = 64

    # Flow
    flow_stencil: str = "five-point"
    newton_tol: float = 1e-11
    newton_max_iter: int = 30
    max_halvings: int = 10
    dt_max: float = 2e-3
    dt_growth: float = 1.5
    cg_rtol: float = 1e-13
    cg_maxiter: int = 4000
    gradient_gamma: float = 1.0
    lp_exponent: float = 2.0

    # Conformal metrics and distances
    quadrature_rel_tol: float = 1e-7
    gauss_order: int = 5
    lattice_gauss_order: int = 3
    fmm_seed_cells: int = 4
    lattice_anisotropy: float = 0.0275     # worst 16-neighbour overestimate, 1/cos(13.28 deg) - 1
    eikonal_flat_error_cells: float = 1.5

    # Verification tolerances ([DERIVED] values are calibrated regression targets)
    area_tolerance: float = 1e-8
    max_principle_slack: float = 1e-7
    monotonicity_slack: float = 1e-6
    gauss_bonnet_tolerance: float = 1e-8
    stationarity_tolerance: float = 1e-9
    decay_tolerance: float = 0.02
    exponent_tolerance: float = 0.05
    fitted_drift_factor: float = 2.0
    equicontinuity_drift: float = 0.20
    cross_validation_tolerance: float = 0.03
    cross_validation_failure: float = 0.05
    ricci_l1_threshold: float = 0.05
    weak_pairing_noise: float = 1e-4
    metric_convergence_fraction: float = 0.02
    holder_min_pairs: int = 20
    holder_min_decades: float = 2.0
    holder_alpha_step: float = 0.005       # envelope exponent grid spacing
    density_lemma_slack: float = 0.01
    quasi_psh_slack: float = 1e-3
    counterexample_l1_slack: float = 1.1

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="KRFLOW_",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("green_interpolation_order")
    @classmethod
    def spline_order(cls, order: int) -> int:
        if order not in (1, 3):
            raise ValueError(f"green_interpolation_order must be 1 or 3, got {order}")
        return order


settings = Settings()


# ---------------------------------------------------------------------------
# Scenario files (TOML: [grid], [flow], [checks], [sampling], [output], [[pole]])
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _locate(text: str, loc: Tuple[Union[str, int], ...]) -> int:
    """Best line number for a pydantic error location."""
    lines = text.splitlines()
    if not loc:
        return 1
    section = str(loc[0])
    header = re.compile(r"^\s*\[\[?\s*" + re.escape(section) + r"\s*\]\]?\s*$")
    headers = [i + 1 for i, line in enumerate(lines) if header.match(line)]
    if not headers:
        return 0
    start = headers[0]
    if section == "pole" and len(loc) > 1 and isinstance(loc[1], int) and loc[1] < len(headers):
        start = headers[loc[1]]
    key = next((str(part) for part in loc[1:] if isinstance(part, str)), None)
    if key is None:
        return start
    key_re = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start, len(lines)):
        if lines[i].lstrip().startswith("["):
            break
        if key_re.match(lines[i]):
            return i + 1
    return start


def parse_scenario(text: str, grid_check: bool = True) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"syntax error: {e}", int(match.group(1)) if match else 0) from e

    try:
        config = ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        dotted = ".".join(str(part) for part in loc)
        if first["type"] == "missing":
            message = f"missing key '{dotted}'"
        else:
            message = f"invalid value for '{dotted}': {first['msg']}"
        raise ConfigError(message, _locate(text, loc)) from e

    if grid_check:
        validate_scenario(config, text)
    return config


def validate_scenario(config: ScenarioConfig, text: str = "") -> None:
    """Re-check module preconditions at load time."""
    from krflow.models import TorusGrid

    try:
        grid = TorusGrid(config.grid.n)
    except ValueError as e:
        raise ConfigError(str(e), _locate(text, ("grid", "n"))) from e

    separation = settings.pole_min_separation_cells * grid.h
    poles = config.pole
    for i, pole in enumerate(poles):
        if pole.sign == "minus" and pole.nu >= 2.0:
            raise ConfigError(
                f"cusp: minus-pole at ({pole.x}, {pole.y}) has nu={pole.nu} >= 2, density not integrable",
                _locate(text, ("pole", i, "nu")),
            )
        for j in range(i):
            other = poles[j]
            dx = pole.x - other.x
            dy = pole.y - other.y
            dx -= round(dx)
            dy -= round(dy)
            distance = (dx * dx + dy * dy) ** 0.5
            if distance == 0.0 and pole.sign != other.sign:
                raise ConfigError(
                    f"plus and minus poles share location ({pole.x}, {pole.y})",
                    _locate(text, ("pole", i)),
                )
            if distance < separation:
                raise ConfigError(
                    f"poles {j} and {i} are {distance:.4g} apart, need >= {separation:.4g} (8h)",
                    _locate(text, ("pole", i)),
                )

    for level in config.checks.counterexample_levels:
        if 2.0 ** -level < 4 * grid.h:
            raise ConfigError(
                f"counterexample level {level} needs net spacing >= 4h at n={grid.n}",
                _locate(text, ("checks", "counterexample_levels")),
            )


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} to a scenario file")


def dump_scenario(config: ScenarioConfig) -> str:
    data = config.model_dump()
    out = []
    for section in ("grid", "flow", "checks", "sampling", "output"):
        out.append(f"[{section}]")
        for key, value in data[section].items():
            out.append(f"{key} = {_toml_value(value)}")
        out.append("")
    for pole in data["pole"]:
        out.append("[[pole]]")
        for key, value in pole.items():
            out.append(f"{key} = {_toml_value(value)}")
        out.append("")
    return "\n".join(out)


def config_hash(config: ScenarioConfig) -> str:
    canonical = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    digest = hashes.Hash(hashes.SHA256())
    digest.update(canonical.encode("utf-8"))
    return digest.finalize().hex()


def apply_overrides(threads: Optional[int] = None, seed: Optional[int] = None,
                    output_dir: Optional[str] = None, strict: Optional[bool] = None) -> None:
    """Apply CLI global flags on top of environment settings."""
    if threads is not None:
        settings.threads = max(1, threads)
    if seed is not None:
        settings.seed = seed
    if output_dir is not None:
        settings.output_dir = output_dir
    if strict is not None:
        settings.strict = strict


def log(message: str) -> None:
    """Status line in the service's glyph style, silenced by `quiet`."""
    if not settings.quiet:
        print(message, flush=True)
