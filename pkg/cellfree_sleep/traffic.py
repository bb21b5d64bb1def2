"""Non-stationary Poisson UE arrivals, session lifecycles and drop accounting.

Demand densities kappa_{z,t} are stored per service category in 20-minute
bins over one profile day; ``day_seconds`` maps that day onto simulated time
(2 h at desk scale, 86400 s for the nominal setting).
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from .config import ScenarioConfig, TrafficParams
from .errors import ScenarioValidationError

logger = logging.getLogger(__name__)

CATEGORIES = ("delay-stringent", "delay-sensitive", "delay-tolerant")
BINS_PER_DAY = 72
COMPLETION_RTOL = 1e-12


class TrafficProfile(BaseModel):
    """kappa per category and bin (Mbit/s/km^2) plus delay budgets D_max (s)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    density: np.ndarray
    delay_budgets: Tuple[float, float, float]
    day_seconds: float

    @property
    def num_bins(self) -> int:
        return self.density.shape[1]

    def bin_of(self, time_s: float) -> int:
        frac = (time_s % self.day_seconds) / self.day_seconds
        return min(int(frac * self.num_bins), self.num_bins - 1)

    def density_at(self, category: int, time_s: float) -> float:
        return float(self.density[category, self.bin_of(time_s)])

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"bin": b, "category": CATEGORIES[z], "density": float(self.density[z, b])}
            for z in range(len(CATEGORIES))
            for b in range(self.num_bins)
        ]
        return pd.DataFrame(rows, columns=["bin", "category", "density"])


class UESession(BaseModel):
    """Read-only view of one UE in the system."""

    id: int
    position: Tuple[float, float]
    category: int
    demand_remaining: float
    delay_remaining: float
    arrival_time: int


class Departures(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: np.ndarray
    rho: np.ndarray
    drop: np.ndarray

    @property
    def count(self) -> int:
        return int(self.ids.size)


class DropLedger:
    """Per-departure rate-satisfaction ratio and drop fraction with running means."""

    def __init__(self):
        self.ids: List[int] = []
        self.categories: List[int] = []
        self.rho: List[float] = []
        self.drop: List[float] = []
        self._drop_sum = 0.0

    def __len__(self) -> int:
        return len(self.drop)

    def record(self, ids: np.ndarray, categories: np.ndarray, rho: np.ndarray, drop: np.ndarray):
        self.ids.extend(int(i) for i in ids)
        self.categories.extend(int(c) for c in categories)
        self.rho.extend(float(r) for r in rho)
        self.drop.extend(float(d) for d in drop)
        self._drop_sum += float(np.sum(drop))

    @property
    def mean_drop(self) -> float:
        return self._drop_sum / len(self.drop) if self.drop else 0.0

    @property
    def mean_rho(self) -> float:
        return float(np.mean(self.rho)) if self.rho else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "ue_id": self.ids,
            "category": [CATEGORIES[c] for c in self.categories],
            "rho": self.rho,
            "drop_fraction": self.drop,
        })


class SessionTable:
    """Struct-of-arrays store of active UEs.

    Delay budgets are counted in whole timesteps so expiry never depends on
    floating-point accumulation. ``gains`` holds the ``[K x L]`` large-scale
    gains, frozen per session; ``pilot`` is the assigned pilot index (-1 until
    the next radio refresh).
    """

    def __init__(self, cfg: ScenarioConfig):
        self.x_max = cfg.demand_size
        self.dt = cfg.timestep
        self.budget_steps = np.array(
            [max(1, int(round(d / cfg.timestep))) for d in cfg.traffic.delay_budgets], dtype=int
        )
        self.delay_budgets = np.asarray(cfg.traffic.delay_budgets, dtype=float)
        self.num_aps = cfg.num_aps
        self._next_id = 0
        self.ids = np.zeros(0, dtype=int)
        self.positions = np.zeros((0, 2))
        self.category = np.zeros(0, dtype=int)
        self.x_rem = np.zeros(0)
        self.d_rem_steps = np.zeros(0, dtype=int)
        self.arrival_step = np.zeros(0, dtype=int)
        self.pilot = np.zeros(0, dtype=int)
        self.gains = np.zeros((0, cfg.num_aps))

    def __len__(self) -> int:
        return int(self.ids.size)

    def add(self, positions: np.ndarray, categories: np.ndarray, gains: np.ndarray, step: int) -> np.ndarray:
        n = len(positions)
        new_ids = np.arange(self._next_id, self._next_id + n)
        self._next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.positions = np.concatenate([self.positions, positions])
        self.category = np.concatenate([self.category, categories])
        self.x_rem = np.concatenate([self.x_rem, np.full(n, self.x_max)])
        self.d_rem_steps = np.concatenate([self.d_rem_steps, self.budget_steps[categories]])
        self.arrival_step = np.concatenate([self.arrival_step, np.full(n, step, dtype=int)])
        self.pilot = np.concatenate([self.pilot, np.full(n, -1, dtype=int)])
        self.gains = np.concatenate([self.gains, gains])
        return new_ids

    def keep(self, mask: np.ndarray):
        for name in ("ids", "positions", "category", "x_rem", "d_rem_steps",
                     "arrival_step", "pilot", "gains"):
            setattr(self, name, getattr(self, name)[mask])

    @property
    def delay_remaining(self) -> np.ndarray:
        return self.d_rem_steps * self.dt

    @property
    def required_rate(self) -> np.ndarray:
        """r_req = x_max / D_max in bit/s."""
        return self.x_max * 1e6 / self.delay_budgets[self.category]

    @property
    def elapsed_fraction(self) -> np.ndarray:
        """Fraction of each UE's delay budget already spent."""
        budget = self.budget_steps[self.category]
        return (budget - self.d_rem_steps) / budget

    def sessions(self) -> List[UESession]:
        return [
            UESession(
                id=int(self.ids[i]),
                position=(float(self.positions[i, 0]), float(self.positions[i, 1])),
                category=int(self.category[i]),
                demand_remaining=float(self.x_rem[i]),
                delay_remaining=float(self.delay_remaining[i]),
                arrival_time=int(self.arrival_step[i]),
            )
            for i in range(len(self))
        ]


def synth_profile(params: TrafficParams, day_seconds: float, num_bins: int = BINS_PER_DAY) -> TrafficProfile:
    """Synthetic diurnal profile standing in for operator DPI data.

    Shape s(h) in [0, 1]: a raised cosine rising from the trough hour to the
    peak hour, and on the way down a raised cosine plus a second-harmonic
    evening shoulder ``shoulder * sin^2``. With shoulder <= 1/4 the extrema
    stay at the peak and trough hours, so max/min = peak/trough exactly.
    """
    hours = np.arange(num_bins) * 24.0 / num_bins
    rise = (params.peak_hour - params.trough_hour) % 24.0
    fall = 24.0 - rise
    x = (hours - params.trough_hour) % 24.0
    u = np.clip(x / rise, 0.0, 1.0)
    v = np.clip((x - rise) / fall, 0.0, 1.0)
    rising = (1.0 - np.cos(np.pi * u)) / 2.0
    falling = (1.0 + np.cos(np.pi * v)) / 2.0 + params.shoulder * np.sin(np.pi * v) ** 2
    shape = np.where(x <= rise, rising, falling)
    kappa = params.trough_density + (params.peak_density - params.trough_density) * shape
    density = np.outer(np.asarray(params.category_mix), kappa)
    return TrafficProfile(density=density, delay_budgets=params.delay_budgets, day_seconds=day_seconds)


def load_profile_csv(path: Union[str, Path], params: TrafficParams, day_seconds: float) -> TrafficProfile:
    """Read a ``bin,category,density`` CSV (category by name or index)."""
    frame = pd.read_csv(path)
    missing = {"bin", "category", "density"} - set(frame.columns)
    if missing:
        raise ValueError(f"traffic profile {path} lacks columns {sorted(missing)}")
    if frame["category"].dtype == object:
        frame["category"] = frame["category"].map({name: z for z, name in enumerate(CATEGORIES)})
        if frame["category"].isna().any():
            raise ValueError(f"traffic profile {path} has unknown category names")
    if not frame["category"].isin(range(len(CATEGORIES))).all():
        raise ValueError(f"traffic profile {path} has category indices outside 0..{len(CATEGORIES) - 1}")
    frame["category"] = frame["category"].astype(int)
    if (frame["density"] < 0).any():
        raise ValueError(f"traffic profile {path} has negative densities")
    bins = frame["bin"]
    off_grid = (bins < 0) | (bins >= BINS_PER_DAY) | (np.mod(bins, 1) != 0)
    if off_grid.any():
        raise ScenarioValidationError("traffic.profile_csv", f"{path} has bins {sorted(set(bins[off_grid]))} "
                                                             f"outside 0..{BINS_PER_DAY - 1}")
    frame["bin"] = bins.astype(int)
    table = frame.pivot_table(index="category", columns="bin", values="density", aggfunc="sum", fill_value=0.0)
    table = table.reindex(index=range(len(CATEGORIES)), columns=range(BINS_PER_DAY), fill_value=0.0)
    return TrafficProfile(density=table.to_numpy(dtype=float), delay_budgets=params.delay_budgets,
                          day_seconds=day_seconds)


def build_profile(cfg: ScenarioConfig, base_dir: Optional[Path] = None) -> TrafficProfile:
    """Profile from ``traffic.profile_csv`` if set, otherwise the synthetic curve."""
    params = cfg.traffic
    if params.profile_csv:
        path = Path(params.profile_csv)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        logger.info("Loading traffic profile from %s", path)
        return load_profile_csv(path, params, cfg.day_seconds)
    return synth_profile(params, cfg.day_seconds)


def arrival_rate(profile: TrafficProfile, category: int, time_s: float, cfg: ScenarioConfig) -> float:
    """lambda_{z,t} = kappa_{z,t} A dt / x_max, expected arrivals per timestep."""
    return profile.density_at(category, time_s) * cfg.area * cfg.timestep / cfg.demand_size


def sample_arrivals(rate: float, rng: np.random.Generator, area_side: float) -> Tuple[int, np.ndarray]:
    """Poisson arrival count with positions uniform over the square area (km)."""
    count = int(rng.poisson(rate)) if rate > 0 else 0
    return count, rng.uniform(0.0, area_side, size=(count, 2))


def advance_sessions(table: SessionTable, rates: np.ndarray, ledger: DropLedger, steps: int = 1) -> Departures:
    """Serve every UE at ``rates`` (bit/s) for ``steps`` timesteps and retire finished ones.

    A UE departs when its demand is served (within a 1e-12 relative
    tolerance) or its delay budget runs out. At departure
    rho = r_ach / r_req and the drop fraction is x_rem / x_max.
    """
    if len(table) == 0:
        empty = np.zeros(0)
        return Departures(ids=np.zeros(0, dtype=int), rho=empty, drop=empty)

    served = np.asarray(rates) * table.dt * steps * 1e-6
    table.x_rem = np.maximum(table.x_rem - served, 0.0)
    table.x_rem[table.x_rem <= COMPLETION_RTOL * table.x_max] = 0.0
    table.d_rem_steps = np.maximum(table.d_rem_steps - steps, 0)

    leaving = (table.x_rem == 0.0) | (table.d_rem_steps == 0)
    if not leaving.any():
        return Departures(ids=np.zeros(0, dtype=int), rho=np.zeros(0), drop=np.zeros(0))

    x_rem = table.x_rem[leaving]
    budget_s = table.delay_budgets[table.category[leaving]]
    elapsed_s = (table.budget_steps[table.category[leaving]] - table.d_rem_steps[leaving]) * table.dt
    r_req = table.x_max / budget_s
    r_ach = (table.x_max - x_rem) / elapsed_s
    rho = r_ach / r_req
    drop = x_rem / table.x_max

    ids = table.ids[leaving]
    ledger.record(ids, table.category[leaving], rho, drop)
    table.keep(~leaving)
    return Departures(ids=ids, rho=rho, drop=drop)
