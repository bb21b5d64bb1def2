"""Network power consumption: load-dependent AP power, sleep discounts, cloud power."""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict

from .config import PowerParams

logger = logging.getLogger(__name__)

NUM_SLEEP_MODES = 4


class PowerBreakdown(BaseModel):
    """Per-AP and cloud power in W; ``total`` is their sum."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    per_ap: np.ndarray
    cloud: float
    total: float
    cloud_overload: bool = False

    @property
    def ap_total(self) -> float:
        return float(np.sum(self.per_ap))


def ap_gops(m_l, num_served, bandwidth_frac: float, params: PowerParams):
    """C_AP,l = c0 + (c1 m_l + c2 m_l |K_l|) * bandwidth_frac."""
    m = np.asarray(m_l, dtype=float)
    n = np.asarray(num_served, dtype=float)
    load = params.ap_gops_per_antenna * m + params.ap_gops_per_stream * m * n
    return params.ap_gops_idle + load * bandwidth_frac


def _non_tx_power(m_l: float, gops: float, params: PowerParams) -> float:
    return m_l * params.ap_static + params.ap_proc_idle + params.ap_proc_slope * gops / params.ap_gops_max


def ap_power(m_l: int, alloc_row, gops: float, sleep_mode: int, params: PowerParams) -> float:
    """AP power when active; eta_s times the non-transmit terms when asleep.

    A sleeping AP's processing is billed at the GOPS idle floor c0.
    """
    tx = float(np.sum(alloc_row))
    if m_l < 0 or gops < 0 or np.any(np.asarray(alloc_row) < 0):
        raise ValueError("ap_power inputs must be non-negative")
    if sleep_mode not in range(NUM_SLEEP_MODES):
        raise ValueError(f"sleep_mode must be in 0..3, got {sleep_mode}")
    if sleep_mode == 0:
        return _non_tx_power(m_l, gops, params) + params.tx_slope * tx
    if tx > 0:
        raise ValueError("a sleeping AP cannot carry transmit power")
    return params.sleep_discounts[sleep_mode] * _non_tx_power(m_l, params.ap_gops_idle, params)


def waking_ap_power(m_l: int, params: PowerParams) -> float:
    """An AP inside its wake-up latency draws SM0 power without transmitting."""
    return _non_tx_power(m_l, params.ap_gops_idle, params)


def cloud_gops(active_ues: int, bandwidth_frac: float, params: PowerParams) -> float:
    """C_GPP = c3 * K_active * bandwidth_frac."""
    return params.cloud_gops_per_ue * active_ues * bandwidth_frac


def cloud_overloaded(total_gops: float, params: PowerParams) -> bool:
    return total_gops > params.cloud_gops_max


def cloud_power(total_gops: float, params: PowerParams) -> float:
    """Cloud power; the load ratio is capped at 1 when the GPP pool is overloaded."""
    if total_gops < 0:
        raise ValueError("total_gops must be non-negative")
    ratio = min(total_gops / params.cloud_gops_max, 1.0)
    return params.cloud_fixed + (params.cloud_proc_idle + params.cloud_proc_slope * ratio) / params.cooling_eff


def network_power(antennas: np.ndarray, sleep_modes: np.ndarray, waking: np.ndarray,
                  tx_per_ap: np.ndarray, served_counts: np.ndarray, active_ues: int,
                  bandwidth_frac: float, params: PowerParams) -> PowerBreakdown:
    """Sum of AP powers plus cloud power for one network snapshot."""
    per_ap = np.empty(len(antennas))
    gops = ap_gops(antennas, served_counts, bandwidth_frac, params)
    for l in range(len(antennas)):
        if waking[l]:
            per_ap[l] = waking_ap_power(int(antennas[l]), params)
        else:
            per_ap[l] = ap_power(int(antennas[l]), tx_per_ap[l], float(gops[l]), int(sleep_modes[l]), params)

    c_gpp = cloud_gops(active_ues, bandwidth_frac, params)
    overload = cloud_overloaded(c_gpp, params)
    if overload:
        logger.debug("cloud GPP overload: %.1f GOPS > %.1f", c_gpp, params.cloud_gops_max)
    cloud = cloud_power(c_gpp, params)
    return PowerBreakdown(per_ap=per_ap, cloud=cloud, total=float(np.sum(per_ap)) + cloud,
                          cloud_overload=overload)
