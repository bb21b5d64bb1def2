"""Scenario configuration: parsing, validation, defaults and random streams.

Every other module reads its constants from a :class:`ScenarioConfig`. Defaults
are the full-size setup (5x5 grid over 1 km², 8 antennas at 250 mW, 20 MHz at
5 GHz, tau_p = 7); remaining constants are documented in DESIGN.md.
"""

import hashlib
import json
import math
import os
import zlib
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ScenarioParseError, ScenarioValidationError

SCENARIO_FILENAME = "scenario.yaml"
SEED_ENV_VAR = "CELLFREE_SEED"


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PowerParams(_Section):
    """AP-side and cloud-side power model constants."""

    ap_static: float = Field(0.2, ge=0, description="P_st, W per active antenna")
    tx_slope: float = Field(4.0, ge=0, description="Delta_tr, PA slope")
    ap_proc_idle: float = Field(1.0, ge=0, description="P0_proc, W")
    ap_proc_slope: float = Field(10.0, ge=0, description="Delta_proc_AP, W")
    ap_gops_max: float = Field(200.0, gt=0, description="C_AP_max, GOPS")
    cloud_fixed: float = Field(20.0, ge=0, description="P_fixed, W")
    cooling_eff: float = Field(0.9, gt=0, description="sigma_cool")
    cloud_proc_idle: float = Field(20.0, ge=0, description="P0_comp, W")
    cloud_proc_slope: float = Field(100.0, ge=0, description="Delta_proc_GPP, W")
    cloud_gops_max: float = Field(2000.0, gt=0, description="C_GPP_max, GOPS")
    sleep_discounts: Tuple[float, float, float, float] = (1.0, 0.675, 0.55, 0.23)
    sleep_latencies: Tuple[float, float, float, float] = (0.0, 37e-6, 500e-6, 5000e-6)
    ap_gops_idle: float = Field(20.0, ge=0, description="c0, GOPS floor")
    ap_gops_per_antenna: float = Field(5.0, ge=0, description="c1, GOPS per antenna")
    gops_ref_antennas: int = Field(8, ge=1, description="antennas at calibrated full load")
    gops_ref_ues: int = Field(10, ge=1, description="served UEs at calibrated full load")
    cloud_gops_per_ue: float = Field(20.0, ge=0, description="c3, GOPS per served UE")
    reference_bandwidth: float = Field(20e6, gt=0, description="bandwidth at which GOPS are quoted")

    @field_validator("sleep_discounts")
    @classmethod
    def validate_discounts(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if v[0] != 1.0:
            raise ValueError("SM0 discount must be exactly 1")
        if any(not 0 < eta <= 1 for eta in v):
            raise ValueError("discount factors must lie in (0, 1]")
        if any(b > a for a, b in zip(v, v[1:])):
            raise ValueError("discount factors must not increase with sleep depth")
        return v

    @field_validator("sleep_latencies")
    @classmethod
    def validate_latencies(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if v[0] != 0.0:
            raise ValueError("SM0 wake-up latency must be 0")
        if any(d < 0 for d in v):
            raise ValueError("wake-up latencies must be non-negative")
        return v

    @model_validator(mode="after")
    def validate_gops_calibration(self) -> "PowerParams":
        if self.ap_gops_per_stream < 0:
            raise ValueError(
                "ap_gops_idle + ap_gops_per_antenna * gops_ref_antennas exceeds ap_gops_max"
            )
        return self

    @property
    def ap_gops_per_stream(self) -> float:
        """c2, solved so that (gops_ref_antennas, gops_ref_ues) hits C_AP_max."""
        base = self.ap_gops_idle + self.ap_gops_per_antenna * self.gops_ref_antennas
        return (self.ap_gops_max - base) / (self.gops_ref_antennas * self.gops_ref_ues)


class TrafficParams(_Section):
    """Diurnal demand profile and per-category delay budgets."""

    peak_density: float = Field(600.0, ge=0, description="kappa at the peak, Mbit/s/km^2")
    trough_density: float = Field(75.0, ge=0, description="kappa at the trough, Mbit/s/km^2")
    peak_hour: float = Field(14.0, ge=0, lt=24)
    trough_hour: float = Field(4.0, ge=0, lt=24)
    shoulder: float = Field(0.15, ge=0, le=0.25, description="evening second-harmonic weight")
    category_mix: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    delay_budgets: Tuple[float, float, float] = (0.05, 0.10, 0.15)
    profile_csv: Optional[str] = Field(None, description="bin,category,density CSV override")
    day_seconds: Optional[float] = Field(
        None, gt=0, description="simulated seconds per profile day; defaults to the episode length"
    )

    @field_validator("category_mix")
    @classmethod
    def validate_mix(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(f < 0 for f in v) or not math.isclose(sum(v), 1.0, abs_tol=1e-9):
            raise ValueError("category_mix must be non-negative and sum to 1")
        return v

    @field_validator("delay_budgets")
    @classmethod
    def validate_budgets(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(d <= 0 for d in v):
            raise ValueError("delay budgets must be positive")
        return v

    @model_validator(mode="after")
    def validate_shape(self) -> "TrafficParams":
        if self.trough_density > self.peak_density:
            raise ValueError("trough_density must not exceed peak_density")
        if self.peak_hour == self.trough_hour:
            raise ValueError("peak_hour and trough_hour must differ")
        return self


class RlParams(_Section):
    """MAPPO hyperparameters and reward weights."""

    gamma: float = Field(0.99, gt=0, le=1)
    gae_lambda: float = Field(0.95, ge=0, le=1, description="psi")
    clip_eps: float = Field(0.2, gt=0)
    entropy_coef: float = Field(0.01, ge=0)
    actor_lr: float = Field(5e-4, ge=0)
    critic_lr: float = Field(5e-4, ge=0)
    ppo_epochs: int = Field(10, ge=1)
    minibatches: int = Field(32, ge=1)
    huber_delta: float = Field(10.0, gt=0)
    reward_w_rs: float = 60.0
    reward_w_pc: float = 0.4
    reward_phi: float = Field(5e-3, ge=0)
    power_unit_w: float = Field(1000.0, gt=0, description="P_net enters the reward in this unit")
    episodes: int = Field(200, ge=1)
    rollout_length: int = Field(512, ge=1, description="decision steps per iteration")
    max_env_steps: Optional[int] = Field(None, ge=1, description="timestep budget, overrides episodes")
    max_grad_norm: float = Field(0.5, gt=0)
    normalize_advantages: bool = True
    share_actor_params: bool = True
    checkpoint_every: int = Field(10, ge=1, description="iterations between checkpoints")


class DqnParams(_Section):
    """DQN baseline settings (artifact defaults)."""

    replay_capacity: int = Field(100_000, ge=1)
    batch_size: int = Field(128, ge=1)
    target_sync: int = Field(1000, ge=1, description="updates between target copies")
    eps_start: float = Field(1.0, ge=0, le=1)
    eps_end: float = Field(0.05, ge=0, le=1)
    eps_decay_steps: int = Field(50_000, ge=1)
    lr: float = Field(5e-4, ge=0)
    gamma: float = Field(0.99, gt=0, le=1)
    learn_start: int = Field(1000, ge=0, description="transitions stored before updates begin")


class DacParams(_Section):
    """DAC-SM1 dual thresholds on achieved/demand rate."""

    upper: float = 55.0
    lower: float = 45.0

    @model_validator(mode="after")
    def validate_band(self) -> "DacParams":
        if self.lower > self.upper:
            raise ValueError("lower threshold must not exceed upper threshold")
        return self


class NetworkParams(_Section):
    """Observation template and network architecture."""

    neighbors: int = Field(4, ge=0, description="G nearest neighbour APs in observations")
    actor_hidden: Tuple[int, ...] = (128, 128)
    critic_hidden: Tuple[int, ...] = (256, 256)
    head_gain: float = Field(0.01, gt=0)


class ScenarioConfig(_Section):
    """Full experiment description."""

    area_side: float = Field(1.0, gt=0, description="km")
    num_aps: int = Field(25, ge=1)
    grid_rows: int = Field(5, ge=1)
    grid_cols: int = Field(5, ge=1)
    max_antennas: int = Field(8, ge=1)
    per_antenna_tx_power: float = Field(0.25, gt=0, description="p_a, W")
    bandwidth: float = Field(20e6, gt=0, description="Hz")
    carrier_freq: float = Field(5e9, gt=0, description="Hz")
    coherence_block: int = Field(200, ge=2, description="tau_c, symbols")
    pilot_length: int = Field(7, ge=1, description="tau_p, symbols")
    noise_variance: Optional[float] = Field(None, gt=0, description="sigma^2 in W; derived if absent")
    noise_figure_db: float = 7.0
    pilot_power: float = Field(0.1, gt=0, description="p_p, W")
    ap_height: float = Field(10.0, gt=0, description="m")
    ue_height: float = Field(1.5, gt=0, description="m")
    shadow_std_db: float = Field(7.82, ge=0)
    strong_threshold: float = Field(0.5, ge=0, le=1, description="chi/beta ratio for PPZF strong UEs")
    cluster_energy_fraction: float = Field(0.9, gt=0, le=1)
    drop_threshold: float = Field(1e-3, ge=0, description="delta_drop")
    timestep: float = Field(1e-3, gt=0, description="dt, s")
    decision_period: int = Field(20, ge=1, description="timesteps per action")
    demand_size: float = Field(1.5, gt=0, description="x_max, Mbit")
    episode_seconds: float = Field(7200.0, gt=0)
    trace_every: int = Field(50, ge=1, description="decision steps per trace row")
    rng_seed: int = Field(0, ge=0, lt=2**64)
    power: PowerParams = PowerParams()
    traffic: TrafficParams = TrafficParams()
    rl: RlParams = RlParams()
    dqn: DqnParams = DqnParams()
    dac: DacParams = DacParams()
    network: NetworkParams = NetworkParams()

    @model_validator(mode="after")
    def validate_invariants(self) -> "ScenarioConfig":
        if self.pilot_length >= self.coherence_block:
            raise ValueError(
                f"tau_p < tau_c violated: pilot_length={self.pilot_length} "
                f">= coherence_block={self.coherence_block}"
            )
        if self.grid_rows * self.grid_cols != self.num_aps:
            raise ValueError(
                f"grid_rows x grid_cols = L violated: {self.grid_rows}x{self.grid_cols} "
                f"!= num_aps={self.num_aps}"
            )
        short = [d for d in self.traffic.delay_budgets if round(d / self.timestep) < 1]
        if short:
            raise ValueError(
                f"traffic.delay_budgets must span at least one timestep of {self.timestep} s, got {short}"
            )
        return self

    @property
    def area(self) -> float:
        """A, km^2."""
        return self.area_side**2

    @property
    def sigma2(self) -> float:
        """Noise variance in W: explicit value or thermal noise plus noise figure."""
        if self.noise_variance is not None:
            return self.noise_variance
        dbm = -174.0 + 10.0 * math.log10(self.bandwidth) + self.noise_figure_db
        return 10.0 ** ((dbm - 30.0) / 10.0)

    @property
    def prelog(self) -> float:
        return (self.coherence_block - self.pilot_length) / self.coherence_block

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_seconds / self.timestep))

    @property
    def day_seconds(self) -> float:
        return self.traffic.day_seconds or self.episode_seconds

    def wake_steps(self, mode: int) -> int:
        """Timesteps an AP stays unavailable after leaving ``mode``."""
        return int(math.ceil(round(self.power.sleep_latencies[mode] / self.timestep, 9)))


def _field_path(loc: Tuple[Union[int, str], ...]) -> str:
    return ".".join(str(part) for part in loc) or "scenario"


def validate_scenario(raw: dict) -> ScenarioConfig:
    """Build a config from a raw mapping, reporting the first violated field."""
    try:
        return ScenarioConfig(**raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioValidationError(_field_path(first["loc"]), first["msg"]) from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    """Load and validate a scenario from a YAML file or a directory holding scenario.yaml."""
    path = Path(path)
    config_path = path / SCENARIO_FILENAME if path.is_dir() else path

    if not config_path.exists():
        raise FileNotFoundError(f"{SCENARIO_FILENAME} not found at {path}")

    try:
        with open(config_path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise ScenarioParseError(config_path, str(getattr(e, "problem", e)), line, column)

    if not isinstance(raw, dict):
        raise ScenarioParseError(config_path, "top level must be a mapping", 1, 1)

    if SEED_ENV_VAR in os.environ:
        try:
            raw["rng_seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ScenarioValidationError(
                "rng_seed", f"{SEED_ENV_VAR}={os.environ[SEED_ENV_VAR]!r} is not an integer"
            ) from None

    return validate_scenario(raw)


def dump_scenario(cfg: ScenarioConfig, path: Union[str, Path]) -> Path:
    """Write ``cfg`` as YAML; loading the file back yields an equal config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=False)
    return path


def config_echo(cfg: ScenarioConfig) -> str:
    """Canonical JSON echo written next to every metrics file."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(config_echo(cfg).encode()).hexdigest()


def ap_positions(cfg: ScenarioConfig) -> np.ndarray:
    """Cell centres of a grid_rows x grid_cols tiling of the square area, in km."""
    dx = cfg.area_side / cfg.grid_cols
    dy = cfg.area_side / cfg.grid_rows
    xs = (np.arange(cfg.grid_cols) + 0.5) * dx
    ys = (np.arange(cfg.grid_rows) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def make_rng(seed: int, stream_tag: str) -> np.random.Generator:
    """Independent reproducible substream per concern (traffic, shadow, policy ...)."""
    key = zlib.crc32(stream_tag.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
