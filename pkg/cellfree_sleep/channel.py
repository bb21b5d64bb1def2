"""Large-scale fading, pilot assignment, channel-estimate gains and clusters.

Shapes follow the ``[L x K]`` convention throughout: rows are APs, columns
are UEs. Small-scale fading is never drawn; the PHY works on the hardened
closed-form SINR and only needs the averages built here.
"""

import logging
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .config import ScenarioConfig

logger = logging.getLogger(__name__)

MIN_DISTANCE_M = 1.0
_CLUSTER_RTOL = 1e-12


class _Table(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class LargeScaleTable(_Table):
    beta: np.ndarray
    positions_ue: np.ndarray


class PilotAssignment(_Table):
    pilot_of: np.ndarray

    @property
    def num_ues(self) -> int:
        return int(self.pilot_of.size)

    @property
    def same_pilot(self) -> np.ndarray:
        """[K x K] mask, True where t and k share a pilot (diagonal included)."""
        return self.pilot_of[:, None] == self.pilot_of[None, :]

    def cocontaminators(self, k: int) -> np.ndarray:
        """P_k, the UEs sharing UE k's pilot (k included)."""
        return np.flatnonzero(self.pilot_of == self.pilot_of[k])


class EstimateTable(_Table):
    chi: np.ndarray


class ClusterMap(_Table):
    """Request clusters (energy criterion over all APs) and the serving subset.

    ``request[l, k]`` is True when AP l is in UE k's 90 %-gain cluster;
    ``serving`` restricts that to operational APs. ``strong`` marks the
    PPZF strong set per AP (delta_{l,k}); ``tau_str`` counts its pilots.
    """

    order: List[np.ndarray]
    request: np.ndarray
    serving: np.ndarray
    strong: np.ndarray
    tau_str: np.ndarray

    def requested_aps(self, k: int) -> np.ndarray:
        return self.order[k]

    def serving_aps(self, k: int) -> np.ndarray:
        """M_k restricted to operational APs, in descending-gain order."""
        aps = self.order[k]
        return aps[self.serving[aps, k]]

    def served_ues(self, l: int) -> np.ndarray:
        """K_l for AP l."""
        return np.flatnonzero(self.serving[l])


def pathloss_db(d3d_m: np.ndarray, carrier_freq: float) -> np.ndarray:
    """3GPP TR 38.901 UMi street-canyon NLOS path loss in dB."""
    d = np.maximum(np.asarray(d3d_m, dtype=float), MIN_DISTANCE_M)
    return 35.3 * np.log10(d) + 22.4 + 21.3 * np.log10(carrier_freq / 1e9)


def large_scale_gain(ap: np.ndarray, ue: np.ndarray, shadow_db: Union[float, np.ndarray],
                     cfg: ScenarioConfig) -> np.ndarray:
    """Linear gain between AP and UE positions (km) with a shadowing draw in dB.

    Broadcasts over leading dimensions, so ``ap[:, None]`` against ``ue[None]``
    yields an ``[L x K]`` table.
    """
    horizontal_m = 1000.0 * np.linalg.norm(np.asarray(ap) - np.asarray(ue), axis=-1)
    d3d = np.hypot(horizontal_m, cfg.ap_height - cfg.ue_height)
    pl = pathloss_db(d3d, cfg.carrier_freq)
    return 10.0 ** (-(pl + np.asarray(shadow_db)) / 10.0)


def draw_shadowing(rng: np.random.Generator, num_aps: int, num_ues: int, std_db: float) -> np.ndarray:
    """I.i.d. log-normal shadowing in dB, shape [L x n]."""
    return rng.normal(0.0, std_db, size=(num_aps, num_ues))


def build_large_scale(cfg: ScenarioConfig, ap_xy: np.ndarray, ue_xy: np.ndarray,
                      shadow_db: np.ndarray) -> LargeScaleTable:
    beta = large_scale_gain(ap_xy[:, None, :], ue_xy[None, :, :], shadow_db, cfg)
    return LargeScaleTable(beta=np.asarray(beta, dtype=float).reshape(len(ap_xy), len(ue_xy)),
                           positions_ue=ue_xy)


def assign_pilots(beta: np.ndarray, tau_p: int, existing: Optional[np.ndarray] = None) -> PilotAssignment:
    """Greedy least-contamination pilot assignment.

    UEs already holding a pilot (``existing >= 0``) keep it. Each remaining UE,
    in column order, takes the lowest unused pilot if one is free, otherwise
    the pilot whose current users have the smallest summed gain toward the
    UE's strongest AP.
    """
    num_ues = beta.shape[1]
    pilot_of = np.full(num_ues, -1, dtype=int)
    if existing is not None:
        pilot_of[: len(existing)] = existing

    for k in np.flatnonzero(pilot_of < 0):
        used = pilot_of[pilot_of >= 0]
        free = np.setdiff1d(np.arange(tau_p), used)
        if free.size:
            pilot_of[k] = free[0]
            continue
        strongest = int(np.argmax(beta[:, k]))
        load = np.bincount(used, weights=beta[strongest, pilot_of >= 0], minlength=tau_p)
        pilot_of[k] = int(np.argmin(load))

    return PilotAssignment(pilot_of=pilot_of)


def estimate_gains(beta: np.ndarray, pilots: PilotAssignment, pilot_power: float,
                   tau_p: int, sigma2: float) -> EstimateTable:
    """MMSE estimate gain chi = tau_p p_p beta^2 / (tau_p p_p sum_{t in P_k} beta_t + sigma^2)."""
    gain = tau_p * pilot_power
    if beta.shape[1] == 0:
        return EstimateTable(chi=np.zeros_like(beta))
    per_pilot = np.zeros((beta.shape[0], tau_p))
    np.add.at(per_pilot.T, pilots.pilot_of, beta.T)
    contaminated = per_pilot[:, pilots.pilot_of]
    chi = gain * beta**2 / (gain * contaminated + sigma2)
    return EstimateTable(chi=chi)


def _strong_set(ratio_row: np.ndarray, candidates: np.ndarray, pilot_of: np.ndarray, cap: int) -> np.ndarray:
    idx = np.flatnonzero(candidates)
    if idx.size == 0 or cap <= 0:
        return idx[:0]
    idx = idx[np.argsort(-ratio_row[idx], kind="stable")]
    while np.unique(pilot_of[idx]).size > cap:
        idx = idx[:-1]
    return idx


def build_clusters(beta: np.ndarray, chi: np.ndarray, pilots: PilotAssignment, fraction: float,
                   antenna_counts: np.ndarray, tau_p: int, strong_threshold: float,
                   available: Optional[np.ndarray] = None) -> ClusterMap:
    """User-centric clusters by the 90 %-gain rule plus the PPZF strong split.

    ``available`` marks operational APs; the request cluster ignores it, the
    serving set does not. The strong set of AP l keeps served UEs with
    chi/beta >= ``strong_threshold`` and demotes the lowest-ratio ones until
    tau_str_l <= min(tau_p, m_l - 1).
    """
    num_aps, num_ues = beta.shape
    if available is None:
        available = np.ones(num_aps, dtype=bool)

    order = np.argsort(-beta, axis=0, kind="stable")
    cum = np.cumsum(np.take_along_axis(beta, order, axis=0), axis=0)
    threshold = fraction * cum[-1] * (1.0 - _CLUSTER_RTOL)
    size = np.argmax(cum >= threshold, axis=0) + 1
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(num_aps)[:, None].repeat(num_ues, axis=1), axis=0)
    request = ranks < size[None, :]
    serving = request & available[:, None]

    ratio = np.divide(chi, beta, out=np.zeros_like(chi), where=beta > 0)
    strong = np.zeros_like(serving)
    tau_str = np.zeros(num_aps, dtype=int)
    for l in range(num_aps):
        cap = min(tau_p, int(antenna_counts[l]) - 1)
        idx = _strong_set(ratio[l], serving[l] & (ratio[l] >= strong_threshold), pilots.pilot_of, cap)
        strong[l, idx] = True
        tau_str[l] = np.unique(pilots.pilot_of[idx]).size

    return ClusterMap(
        order=[order[: size[k], k] for k in range(num_ues)],
        request=request,
        serving=serving,
        strong=strong,
        tau_str=tau_str,
    )
