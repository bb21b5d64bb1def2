"""Downlink power allocation, PPZF effective SINR and achievable rates."""

import numpy as np
from pydantic import BaseModel, ConfigDict

from .channel import ClusterMap, PilotAssignment
from .errors import InternalConsistencyError


class PowerAllocation(BaseModel):
    """p_{l,k} in W, non-zero only where AP l is operational and k is in K_l."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: np.ndarray

    @property
    def per_ap(self) -> np.ndarray:
        return self.p.sum(axis=1)


class RateReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    sinr: np.ndarray
    rate: np.ndarray
    prelog: float


def allocate_power(clusters: ClusterMap, chi: np.ndarray, antenna_counts: np.ndarray,
                   p_a: float) -> PowerAllocation:
    """p_{l,k} = m_l p_a chi_{l,k} / sum_{j in K_l} chi_{l,j}.

    The serving mask already excludes sleeping and waking APs, so those rows
    come out zero together with APs whose K_l is empty or m_l = 0.
    """
    weights = np.where(clusters.serving, chi, 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    budget = (np.asarray(antenna_counts, dtype=float) * p_a)[:, None]
    p = np.divide(budget * weights, totals, out=np.zeros_like(weights), where=totals > 0)
    return PowerAllocation(p=p)


def _effective_antennas(clusters: ClusterMap, alloc: PowerAllocation, antenna_counts: np.ndarray) -> np.ndarray:
    g = np.asarray(antenna_counts, dtype=float) - clusters.tau_str
    transmitting = alloc.per_ap > 0
    bad = np.flatnonzero(transmitting & (g <= 0))
    if bad.size:
        raise InternalConsistencyError(
            f"m_l - tau_str_l <= 0 for transmitting APs {bad.tolist()}"
        )
    return np.where(transmitting, g, 0.0)


def compute_sinr(clusters: ClusterMap, chi: np.ndarray, beta: np.ndarray, alloc: PowerAllocation,
                 pilots: PilotAssignment, antenna_counts: np.ndarray, sigma2: float,
                 bandwidth: float, prelog: float) -> RateReport:
    """Closed-form PPZF SINR and achievable rate, vectorised.

    ``coherent[t, k] = sum_l sqrt((m_l - tau_str_l) p_{l,t} chi_{l,k})``; its
    diagonal squared is the desired signal and the off-diagonal same-pilot
    entries squared are pilot-contamination interference.
    """
    g = _effective_antennas(clusters, alloc, antenna_counts)
    coherent = np.sqrt(g[:, None] * alloc.p).T @ np.sqrt(chi)
    signal = np.diag(coherent) ** 2
    others = pilots.same_pilot & ~np.eye(pilots.num_ues, dtype=bool)
    contamination = np.where(others, coherent**2, 0.0).sum(axis=0)
    delta = clusters.strong.astype(float)
    noncoherent = alloc.per_ap @ (beta - delta * chi)
    sinr = signal / (contamination + noncoherent + sigma2)
    rate = prelog * bandwidth * np.log2(1.0 + sinr)
    return RateReport(sinr=sinr, rate=rate, prelog=prelog)


def sinr_oracle(clusters: ClusterMap, chi: np.ndarray, beta: np.ndarray, alloc: PowerAllocation,
                pilots: PilotAssignment, antenna_counts: np.ndarray, sigma2: float,
                bandwidth: float, prelog: float) -> RateReport:
    """Unoptimised per-UE loop over the SINR terms, used to cross-check compute_sinr."""
    num_aps, num_ues = beta.shape
    p = alloc.p
    g = [0.0] * num_aps
    for l in range(num_aps):
        if p[l].sum() > 0:
            g[l] = float(antenna_counts[l] - clusters.tau_str[l])
    sinr = np.zeros(num_ues)
    for k in range(num_ues):
        num = 0.0
        for l in range(num_aps):
            num += np.sqrt(g[l] * p[l, k] * chi[l, k])
        num = num**2

        coherent = 0.0
        for t in range(num_ues):
            if t == k or pilots.pilot_of[t] != pilots.pilot_of[k]:
                continue
            acc = 0.0
            for l in range(num_aps):
                acc += np.sqrt(g[l] * p[l, t] * chi[l, k])
            coherent += acc**2

        noncoherent = 0.0
        for t in range(num_ues):
            for l in range(num_aps):
                d = 1.0 if clusters.strong[l, k] else 0.0
                noncoherent += p[l, t] * (beta[l, k] - d * chi[l, k])

        sinr[k] = num / (coherent + noncoherent + sigma2)
    rate = prelog * bandwidth * np.log2(1.0 + sinr)
    return RateReport(sinr=sinr, rate=rate, prelog=prelog)
