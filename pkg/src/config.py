import json
import logging
import os
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.analog import AnalogConfig
from src.controller import DboConfig
from src.device import ThermalModel
from src.engine import ThermalSchedule
from src.variation import VariationSpec

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "out"
ENV_OUTPUT_DIR = "DBO_OUTPUT_DIR"
ENV_LOG_LEVEL = "DBO_LOG_LEVEL"
ENV_SEED = "DBO_SEED"


class ConfigError(ValueError):
    """Scenario file could not be read or failed validation."""


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)


class SweepSection(_Section):
    v_min: float = Field(default=0.0, ge=0)
    v_max: float = Field(default=0.8, gt=0)
    points: int = Field(default=801, ge=2)
    temperature: float = 25.0
    vary: Optional[Literal["tmr0", "vh", "temp"]] = None
    values: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "SweepSection":
        if self.v_min >= self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if self.vary is not None and len(self.values) < 2:
            raise ValueError("a parameter family needs at least 2 values")
        return self


class DriftSection(_Section):
    start_c: float = 25.0
    end_c: float = 125.0
    rate_c_per_s: float = Field(default=98e3, gt=0)
    settle_s: float = Field(default=20e-6, gt=0)
    hold_s: float = Field(default=20e-6, gt=0)
    # Fixed comparison biases; empty means V_OPT at start_c
    baselines: List[float] = Field(default_factory=list)


class AccuracySection(_Section):
    tmr0_values: List[float] = Field(default_factory=lambda: [0.6, 0.75, 0.9, 1.05, 1.2])
    vh_values: List[float] = Field(default_factory=lambda: [0.2, 0.2375, 0.275, 0.3125, 0.35])
    temperature: float = 25.0
    duration_s: float = Field(default=20e-6, gt=0)
    temps: List[float] = Field(default_factory=lambda: [-40.0, -15.0, 0.0, 25.0, 50.0, 75.0, 100.0, 125.0])


class VariationSection(_Section):
    """
    Population layout for the ber command. The sigma/mu grid, the temperatures
    and the seed come from `ber` and the top-level `seed`, so they are not
    accepted here.
    """
    sigma_over_mu_rp: float = Field(default=0.0, ge=0)
    sa_offset_sigma: float = Field(default=1e-6, gt=0)
    n_cells: int = Field(default=100_000, ge=1)
    n_blocks: int = Field(default=64, ge=1)
    rows: int = Field(default=512, ge=1)
    data_bl: int = Field(default=32, ge=1)
    ref_bl: int = Field(default=2, ge=2)
    block_sigma_over_mu: float = Field(default=0.0, ge=0)
    tmr0_vh_correlation: float = Field(default=0.0, gt=-1, lt=1)
    dbo_cycles: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_capacity(self) -> "VariationSection":
        capacity = self.n_blocks * self.rows * self.data_bl
        if self.n_cells > capacity:
            raise ValueError(
                f"n_cells ({self.n_cells}) exceeds {self.n_blocks} blocks x {self.rows * self.data_bl} data cells"
            )
        return self

    def spec(self, sigma_tmr0: float, sigma_vh: float, temperature: float, seed: int) -> VariationSpec:
        return VariationSpec(
            sigma_over_mu_tmr0=sigma_tmr0, sigma_over_mu_vh=sigma_vh,
            temperature=temperature, seed=seed, **self.model_dump(),
        )


class BerSection(_Section):
    sigma_over_mu: List[float] = Field(
        default_factory=lambda: [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08]
    )
    # Paired element-wise with sigma_over_mu (which then applies to tmr0 only); empty ties vh to it
    sigma_over_mu_vh: List[float] = Field(default_factory=list)
    temperatures: List[float] = Field(default_factory=lambda: [25.0, 125.0])
    # Empty means the nominal V_OPT at 25 C
    fixed_v_read: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "BerSection":
        if not self.sigma_over_mu or not self.temperatures:
            raise ValueError("ber needs at least one sigma/mu value and one temperature")
        if any(s < 0 for s in self.sigma_over_mu + self.sigma_over_mu_vh):
            raise ValueError("sigma/mu values must be >= 0")
        if self.sigma_over_mu_vh and len(self.sigma_over_mu_vh) != len(self.sigma_over_mu):
            raise ValueError(
                f"sigma_over_mu_vh has {len(self.sigma_over_mu_vh)} values, "
                f"sigma_over_mu has {len(self.sigma_over_mu)}"
            )
        if any(v < 0 for v in self.fixed_v_read):
            raise ValueError("fixed read biases must be >= 0 V")
        return self

    def sigma_grid(self) -> List[Tuple[float, float]]:
        """(sigma/mu tmr0, sigma/mu vh) per grid point."""
        vh = self.sigma_over_mu_vh or self.sigma_over_mu
        return list(zip(self.sigma_over_mu, vh))


class ScenarioConfig(BaseModel):
    """
    Everything one command run needs. Every field has a default, so an empty
    JSON object is a valid scenario (the nominal reference design at 25 C).
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    device: ThermalModel = Field(default_factory=ThermalModel)
    analog: AnalogConfig = Field(default_factory=AnalogConfig)
    dbo: DboConfig = Field(default_factory=DboConfig)
    schedule: ThermalSchedule = Field(default_factory=ThermalSchedule)
    variation: VariationSection = Field(default_factory=VariationSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    drift: DriftSection = Field(default_factory=DriftSection)
    accuracy: AccuracySection = Field(default_factory=AccuracySection)
    ber: BerSection = Field(default_factory=BerSection)
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR


def format_validation_error(exc: ValidationError) -> str:
    """One line per problem, each prefixed by the dotted path of the offending key."""
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _env_defaults(data: Dict[str, Any], env: Mapping[str, str]) -> Dict[str, Any]:
    # Environment only fills what the file left out
    data = dict(data)
    if "seed" not in data and env.get(ENV_SEED):
        try:
            data["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}")
    if "output_dir" not in data and env.get(ENV_OUTPUT_DIR):
        data["output_dir"] = env[ENV_OUTPUT_DIR]
    return data


def validate_config(data: Dict[str, Any]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def load_config(path: Optional[str] = None, env: Optional[Mapping[str, str]] = None) -> ScenarioConfig:
    """Read a scenario file (or none) and layer environment defaults underneath it."""
    env = os.environ if env is None else env
    data = _read_json(path) if path else {}
    cfg = validate_config(_env_defaults(data, env))
    logger.info(f"Loaded scenario from {path or '<defaults>'} (seed={cfg.seed})")
    return cfg


def apply_overrides(cfg: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
    """
    Apply command-line values keyed by dotted path (e.g. "dbo.fine_step").
    None means the flag was not given.
    """
    data = cfg.model_dump()
    changed = False
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        changed = True
    if not changed:
        return cfg
    return validate_config(data)


def dump_config(cfg: ScenarioConfig) -> str:
    return cfg.model_dump_json(indent=2) + "\n"
