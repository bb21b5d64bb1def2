"""Multi-agent MDP over the cell-free network.

One agent per AP. Every decision step applies a joint action (antenna delta
and sleep-mode choice per AP) and then simulates ``decision_period``
timesteps of arrivals, service and departures. Radio quantities (pilots,
estimates, clusters, powers, rates) are recomputed only when an event
changes them: arrivals, departures, actions or a wake-up completing. The
hardened SINR is constant in between.

Observation layout per AP (all entries in [-1, 1]):

====  =========================================================  ===================
idx   feature                                                    scale
====  =========================================================  ===================
0     own power                                                  / full-load AP power
1     active antennas m_l                                        / M_max
2     sleep mode s_l                                             / 3
3     waking flag                                                0 or 1
4     associated UEs                                             / 20, clipped
5     summed required rate of associated UEs                     / 1 Gbit/s, clipped
6     summed achieved rate of associated UEs                     / 1 Gbit/s, clipped
7     mean chi of served UEs                                     (dB + 100) / 40, clipped; 0 if none
8..   (m / M_max, s / 3) of the G nearest APs                    zero-padded
====  =========================================================  ===================

Global state: total power / full-load network power, current arrival rate /
profile peak rate, episode mean drop ratio, mean elapsed delay fraction of
present UEs, then (m / M_max, s / 3) for every AP.
"""

import logging
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from . import channel, phy, power, traffic
from .config import RlParams, ScenarioConfig, ap_positions, make_rng

logger = logging.getLogger(__name__)

ANTENNA_DELTAS = (-1, 0, 1)
NUM_SLEEP_CHOICES = 4
NUM_JOINT_ACTIONS = len(ANTENNA_DELTAS) * NUM_SLEEP_CHOICES
OWN_FEATURES = 8
UE_SCALE = 20.0
RATE_SCALE = 1e9
CHI_DB_OFFSET = 100.0
CHI_DB_SPAN = 40.0


class _Arrays(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class APControlState(_Arrays):
    """Per-AP antennas m_l, sleep mode s_l (target mode while waking) and wake timer."""

    antennas: np.ndarray
    sleep_modes: np.ndarray
    wake_steps: np.ndarray

    @property
    def waking(self) -> np.ndarray:
        return self.wake_steps > 0

    @property
    def operational(self) -> np.ndarray:
        return (self.sleep_modes == 0) & ~self.waking & (self.antennas >= 1)

    def wake_timer(self, dt: float) -> np.ndarray:
        return self.wake_steps * dt


class JointAction(_Arrays):
    """antenna_delta in {-1, 0, +1} and sleep_choice in {0..3} for every AP."""

    antenna_delta: np.ndarray
    sleep_choice: np.ndarray

    @classmethod
    def from_heads(cls, antenna_idx: np.ndarray, sleep_choice: np.ndarray) -> "JointAction":
        return cls(antenna_delta=np.asarray(antenna_idx, dtype=int) - 1,
                   sleep_choice=np.asarray(sleep_choice, dtype=int))

    @classmethod
    def from_indices(cls, joint_idx: np.ndarray) -> "JointAction":
        """Flat index a = antenna_idx * 4 + sleep_choice over the 12 joint choices."""
        joint_idx = np.asarray(joint_idx, dtype=int)
        return cls.from_heads(joint_idx // NUM_SLEEP_CHOICES, joint_idx % NUM_SLEEP_CHOICES)

    def to_indices(self) -> np.ndarray:
        return (self.antenna_delta + 1) * NUM_SLEEP_CHOICES + self.sleep_choice


class APStatus(_Arrays):
    """What each AP can see locally; the only state baselines may read."""

    antennas: np.ndarray
    sleep_modes: np.ndarray
    waking: np.ndarray
    associated: np.ndarray
    demand_rate: np.ndarray
    achieved_rate: np.ndarray
    max_antennas: int


class StepInfo(BaseModel):
    """Aggregates over one decision period."""

    time_s: float
    timesteps: int
    p_net: float
    p_ap: float
    p_cloud: float
    energy_w_steps: float
    xi_sum: float
    num_ues: int
    demand_rate: float
    arrival_rate: float
    offered_load: float
    drop_ratio: float
    departures: int
    mode_counts: Tuple[int, int, int, int]
    mean_antennas: float
    clamps: int
    cloud_overload_steps: int
    antennas: Tuple[int, ...]
    sleep_modes: Tuple[int, ...]


class TickStats(NamedTuple):
    reward: float
    power: power.PowerBreakdown
    mean_xi: float
    demand_rate: float
    departures: int


class StepResult(_Arrays):
    observations: np.ndarray
    global_state: np.ndarray
    reward: float
    done: bool
    info: StepInfo


def rs_score(rho, phi: float):
    """Rate-satisfaction score: rho - 1 below 1, phi (1 - 1/rho) at or above 1."""
    rho = np.asarray(rho, dtype=float)
    inv = np.divide(1.0, rho, out=np.zeros_like(rho), where=rho >= 1.0)
    return np.where(rho < 1.0, rho - 1.0, phi * (1.0 - inv))


def reward(rho: np.ndarray, p_net_w: float, rl: RlParams) -> float:
    """R = w_rs mean(xi) - w_pc P_net, P_net in ``rl.power_unit_w``; empty mean is 0."""
    mean_xi = float(np.mean(rs_score(rho, rl.reward_phi))) if len(rho) else 0.0
    return rl.reward_w_rs * mean_xi - rl.reward_w_pc * p_net_w / rl.power_unit_w


class CellFreeEnv:
    """Sequential environment instance; independent instances share nothing mutable."""

    def __init__(self, cfg: ScenarioConfig, profile: Optional[traffic.TrafficProfile] = None,
                 base_dir: Optional[Path] = None):
        self.cfg = cfg
        self.profile = profile or traffic.build_profile(cfg, base_dir)
        self.ap_xy = ap_positions(cfg)
        self.num_agents = cfg.num_aps
        self.bandwidth_frac = cfg.bandwidth / cfg.power.reference_bandwidth
        self.neighbors = self._nearest_neighbors(cfg.network.neighbors)
        self.obs_dim = OWN_FEATURES + 2 * cfg.network.neighbors
        self.state_dim = 4 + 2 * cfg.num_aps
        self._ap_power_scale = self._full_load_ap_power()
        self._net_power_scale = cfg.num_aps * self._ap_power_scale + power.cloud_power(
            cfg.power.cloud_gops_max, cfg.power)
        peak = self.profile.density.sum(axis=0).max()
        self._rate_scale = max(peak * cfg.area * cfg.timestep / cfg.demand_size, 1e-12)
        self.episode = 0
        self.reset()

    def _nearest_neighbors(self, count: int) -> np.ndarray:
        d = np.linalg.norm(self.ap_xy[:, None] - self.ap_xy[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        order = np.argsort(d, axis=1, kind="stable")[:, : min(count, self.num_agents - 1)]
        return order

    def _full_load_ap_power(self) -> float:
        p = self.cfg.power
        m = self.cfg.max_antennas
        gops = float(power.ap_gops(m, p.gops_ref_ues, self.bandwidth_frac, p))
        return power.ap_power(m, [m * self.cfg.per_antenna_tx_power], gops, 0, p)

    # ------------------------------------------------------------------ reset

    def reset(self, episode: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        if episode is not None:
            self.episode = episode
        cfg = self.cfg
        self.traffic_rng = make_rng(cfg.rng_seed, f"traffic/{self.episode}")
        self.shadow_rng = make_rng(cfg.rng_seed, f"shadow/{self.episode}")
        self.control = APControlState(
            antennas=np.full(cfg.num_aps, cfg.max_antennas, dtype=int),
            sleep_modes=np.zeros(cfg.num_aps, dtype=int),
            wake_steps=np.zeros(cfg.num_aps, dtype=int),
        )
        self.sessions = traffic.SessionTable(cfg)
        self.ledger = traffic.DropLedger()
        self.step_count = 0
        self.clamps = 0
        self._dirty = True
        self._refresh()
        return self.observe_all(), self.global_state()

    @property
    def done(self) -> bool:
        return self.step_count >= self.cfg.episode_steps

    @property
    def time_s(self) -> float:
        return self.step_count * self.cfg.timestep

    # ------------------------------------------------------------------ radio

    def _refresh(self):
        cfg = self.cfg
        ctl = self.control
        beta = self.sessions.gains.T
        self.pilots = channel.assign_pilots(beta, cfg.pilot_length, existing=self.sessions.pilot)
        self.sessions.pilot = self.pilots.pilot_of.copy()
        self.beta = beta
        self.chi = channel.estimate_gains(beta, self.pilots, cfg.pilot_power, cfg.pilot_length, cfg.sigma2).chi
        self.clusters = channel.build_clusters(
            beta, self.chi, self.pilots, cfg.cluster_energy_fraction, ctl.antennas,
            cfg.pilot_length, cfg.strong_threshold, available=ctl.operational,
        )
        self.alloc = phy.allocate_power(self.clusters, self.chi, ctl.antennas, cfg.per_antenna_tx_power)
        self.rates = phy.compute_sinr(
            self.clusters, self.chi, beta, self.alloc, self.pilots, ctl.antennas,
            cfg.sigma2, cfg.bandwidth, cfg.prelog,
        )
        served_counts = self.clusters.serving.sum(axis=1)
        active_ues = int(self.clusters.serving.any(axis=0).sum())
        self.breakdown = power.network_power(
            ctl.antennas, ctl.sleep_modes, ctl.waking, self.alloc.per_ap, served_counts,
            active_ues, self.bandwidth_frac, cfg.power,
        )
        self.rho = self.rates.rate / self.sessions.required_rate if len(self.sessions) else np.zeros(0)
        self._dirty = False

    def current_reward(self) -> float:
        return reward(self.rho, self.breakdown.total, self.cfg.rl)

    def dump_channel_tables(self, out_dir: Path) -> Tuple[Path, Path]:
        """Write beta.csv and chi.csv ([AP x UE id]) for offline inspection."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        columns = [f"ue_{i}" for i in self.sessions.ids]
        paths = out_dir / "beta.csv", out_dir / "chi.csv"
        for path, table in zip(paths, (self.beta, self.chi)):
            pd.DataFrame(table, columns=columns).rename_axis("ap").to_csv(path)
        return paths

    # ---------------------------------------------------------------- actions

    def apply_actions(self, action: JointAction):
        """Clamp antenna deltas to [0, M_max]; deepen sleep at once, charge exit latency on waking."""
        ctl = self.control
        target = ctl.antennas + action.antenna_delta
        clipped = np.clip(target, 0, self.cfg.max_antennas)
        self.clamps += int(np.count_nonzero(clipped != target))
        ctl.antennas = clipped.astype(int)

        for l, choice in enumerate(np.asarray(action.sleep_choice, dtype=int)):
            current = int(ctl.sleep_modes[l])
            if choice > current:
                ctl.sleep_modes[l] = choice
                ctl.wake_steps[l] = 0
            elif choice < current:
                ctl.sleep_modes[l] = choice
                ctl.wake_steps[l] = self.cfg.wake_steps(current)
        self._dirty = True

    # ------------------------------------------------------------------- time

    def total_arrival_rate(self) -> float:
        return sum(
            traffic.arrival_rate(self.profile, z, self.time_s, self.cfg)
            for z in range(len(traffic.CATEGORIES))
        )

    def offered_load(self) -> float:
        """Profile demand kappa_t A in Mbit/s."""
        return self.total_arrival_rate() * self.cfg.demand_size / self.cfg.timestep

    def _arrive(self):
        cfg = self.cfg
        positions, categories = [], []
        for z in range(len(traffic.CATEGORIES)):
            lam = traffic.arrival_rate(self.profile, z, self.time_s, cfg)
            count, pos = traffic.sample_arrivals(lam, self.traffic_rng, cfg.area_side)
            if count:
                positions.append(pos)
                categories.append(np.full(count, z, dtype=int))
        if not positions:
            return 0
        pos = np.concatenate(positions)
        cats = np.concatenate(categories)
        shadow = channel.draw_shadowing(self.shadow_rng, cfg.num_aps, len(pos), cfg.shadow_std_db)
        gains = channel.build_large_scale(cfg, self.ap_xy, pos, shadow).beta.T
        self.sessions.add(pos, cats, gains, self.step_count)
        self._dirty = True
        return len(pos)

    def _tick(self) -> TickStats:
        """Serve, retire, count down wake timers and admit arrivals for one timestep."""
        if self._dirty:
            self._refresh()
        snapshot = self.breakdown
        demand = float(self.sessions.required_rate.sum()) if len(self.sessions) else 0.0
        mean_xi = float(np.mean(rs_score(self.rho, self.cfg.rl.reward_phi))) if len(self.rho) else 0.0
        r = self.current_reward()

        departures = traffic.advance_sessions(self.sessions, self.rates.rate, self.ledger)
        if departures.count:
            self._dirty = True

        ctl = self.control
        was_waking = ctl.waking
        if was_waking.any():
            ctl.wake_steps = np.maximum(ctl.wake_steps - 1, 0)
            if (was_waking & ~ctl.waking).any():
                self._dirty = True

        self.step_count += 1
        self._arrive()
        return TickStats(r, snapshot, mean_xi, demand, departures.count)

    def step(self, action: JointAction) -> StepResult:
        cfg = self.cfg
        self.apply_actions(action)
        start = self.time_s
        arrival_rate = self.total_arrival_rate()
        offered = self.offered_load()
        total = energy = xi_sum = p_ap = p_cloud = demand = 0.0
        departures = overload = 0
        ticks = 0
        while ticks < cfg.decision_period and not self.done:
            tick = self._tick()
            total += tick.reward
            energy += tick.power.total
            xi_sum += tick.mean_xi
            p_ap += tick.power.ap_total
            p_cloud += tick.power.cloud
            overload += int(tick.power.cloud_overload)
            demand += tick.demand_rate
            departures += tick.departures
            ticks += 1

        if self._dirty:
            self._refresh()
        ctl = self.control
        n = max(ticks, 1)
        info = StepInfo(
            time_s=start,
            timesteps=ticks,
            p_net=energy / n,
            p_ap=p_ap / n,
            p_cloud=p_cloud / n,
            energy_w_steps=energy,
            xi_sum=xi_sum,
            num_ues=len(self.sessions),
            demand_rate=demand / n,
            arrival_rate=arrival_rate,
            offered_load=offered,
            drop_ratio=self.ledger.mean_drop,
            departures=departures,
            mode_counts=tuple(int(np.count_nonzero(ctl.sleep_modes == s)) for s in range(NUM_SLEEP_CHOICES)),
            mean_antennas=float(np.mean(np.where(ctl.operational, ctl.antennas, 0))),
            clamps=self.clamps,
            cloud_overload_steps=overload,
            antennas=tuple(int(m) for m in ctl.antennas),
            sleep_modes=tuple(int(s) for s in ctl.sleep_modes),
        )
        return StepResult(observations=self.observe_all(), global_state=self.global_state(),
                          reward=total, done=self.done, info=info)

    # ----------------------------------------------------------- observations

    def ap_status(self) -> APStatus:
        assoc = self.clusters.request
        n = len(self.sessions)
        r_req = self.sessions.required_rate if n else np.zeros(0)
        rate = self.rates.rate if n else np.zeros(0)
        ctl = self.control
        return APStatus(
            antennas=ctl.antennas.copy(),
            sleep_modes=ctl.sleep_modes.copy(),
            waking=ctl.waking.copy(),
            associated=assoc.sum(axis=1),
            demand_rate=assoc @ r_req if n else np.zeros(self.num_agents),
            achieved_rate=assoc @ rate if n else np.zeros(self.num_agents),
            max_antennas=self.cfg.max_antennas,
        )

    def observe_all(self) -> np.ndarray:
        cfg = self.cfg
        ctl = self.control
        status = self.ap_status()
        m_norm = ctl.antennas / cfg.max_antennas
        s_norm = ctl.sleep_modes / (NUM_SLEEP_CHOICES - 1)

        serving = self.clusters.serving
        counts = serving.sum(axis=1)
        chi_sum = np.where(serving, self.chi, 0.0).sum(axis=1)
        mean_chi = np.divide(chi_sum, counts, out=np.zeros(self.num_agents), where=counts > 0)
        chi_db = 10.0 * np.log10(np.where(mean_chi > 0, mean_chi, 1.0))
        chi_feat = np.where(counts > 0, (chi_db + CHI_DB_OFFSET) / CHI_DB_SPAN, 0.0)

        obs = np.zeros((self.num_agents, self.obs_dim))
        obs[:, 0] = self.breakdown.per_ap / self._ap_power_scale
        obs[:, 1] = m_norm
        obs[:, 2] = s_norm
        obs[:, 3] = ctl.waking.astype(float)
        obs[:, 4] = status.associated / UE_SCALE
        obs[:, 5] = status.demand_rate / RATE_SCALE
        obs[:, 6] = status.achieved_rate / RATE_SCALE
        obs[:, 7] = chi_feat
        for j in range(self.neighbors.shape[1]):
            nb = self.neighbors[:, j]
            obs[:, OWN_FEATURES + 2 * j] = m_norm[nb]
            obs[:, OWN_FEATURES + 2 * j + 1] = s_norm[nb]
        return np.clip(obs, -1.0, 1.0)

    def observe(self, ap_id: int) -> np.ndarray:
        if not 0 <= ap_id < self.num_agents:
            raise IndexError(f"AP id {ap_id} out of range 0..{self.num_agents - 1}")
        return self.observe_all()[ap_id]

    def global_state(self) -> np.ndarray:
        ctl = self.control
        n = len(self.sessions)
        head = [
            self.breakdown.total / self._net_power_scale,
            self.total_arrival_rate() / self._rate_scale,
            self.ledger.mean_drop,
            float(np.mean(self.sessions.elapsed_fraction)) if n else 0.0,
        ]
        per_ap = np.column_stack([ctl.antennas / self.cfg.max_antennas,
                                  ctl.sleep_modes / (NUM_SLEEP_CHOICES - 1)]).ravel()
        return np.clip(np.concatenate([head, per_ap]), -1.0, 1.0)
