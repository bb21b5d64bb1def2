"""AP and cloud power, sleep discounts and the network breakdown."""

import numpy as np
import pytest

from cellfree_sleep.config import PowerParams
from cellfree_sleep.power import (
    ap_gops,
    ap_power,
    cloud_power,
    network_power,
    waking_ap_power,
)

P = PowerParams()


def _idle(m: int) -> float:
    return m * P.ap_static + P.ap_proc_idle + P.ap_proc_slope * P.ap_gops_idle / P.ap_gops_max


def test_sleep_discounts_scale_non_transmit_power():
    base = ap_power(8, np.zeros(0), P.ap_gops_idle, 0, P)
    assert base == pytest.approx(_idle(8))
    for mode, eta in enumerate((1.0, 0.675, 0.55, 0.23)):
        assert ap_power(8, np.zeros(0), P.ap_gops_idle, mode, P) == pytest.approx(eta * base, rel=1e-12)


def test_power_non_increasing_in_sleep_depth():
    powers = [ap_power(5, np.zeros(0), P.ap_gops_idle, s, P) for s in range(4)]
    assert powers[0] > powers[1] > powers[2] > powers[3]


def test_active_ap_adds_transmit_and_load():
    row = np.array([0.5, 1.5])
    gops = float(ap_gops(8, 2, 1.0, P))
    got = ap_power(8, row, gops, 0, P)
    expected = 8 * 0.2 + 4.0 * 2.0 + 1.0 + 10.0 * gops / 200.0
    assert got == pytest.approx(expected, rel=1e-12)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        ap_power(-1, np.zeros(0), 20.0, 0, P)
    with pytest.raises(ValueError):
        ap_power(4, np.array([-0.1]), 20.0, 0, P)
    with pytest.raises(ValueError):
        ap_power(4, np.zeros(0), 20.0, 4, P)
    with pytest.raises(ValueError):
        ap_power(4, np.array([0.5]), 20.0, 2, P)
    with pytest.raises(ValueError):
        cloud_power(-1.0, P)


def test_gops_model():
    assert ap_gops(0, 5, 1.0, P) == pytest.approx(P.ap_gops_idle)
    assert ap_gops(8, 10, 1.0, P) == pytest.approx(P.ap_gops_max)
    step = ap_gops(4, 6, 1.0, P) - ap_gops(4, 3, 1.0, P)
    assert step == pytest.approx(P.ap_gops_per_stream * 4 * 3)


def test_cloud_power_points():
    assert cloud_power(0.0, P) == pytest.approx(20.0 + 20.0 / 0.9)
    assert cloud_power(P.cloud_gops_max, P) == pytest.approx(20.0 + 120.0 / 0.9)
    assert cloud_power(10 * P.cloud_gops_max, P) == cloud_power(P.cloud_gops_max, P)
    one = cloud_power(500.0, PowerParams(cooling_eff=1.0)) - P.cloud_fixed
    two = cloud_power(500.0, PowerParams(cooling_eff=2.0)) - P.cloud_fixed
    assert two == pytest.approx(one / 2)


def _network(antennas, modes, waking=None, tx=None, served=None, active_ues=0, params=P):
    n = len(antennas)
    antennas = np.asarray(antennas)
    waking = np.zeros(n, dtype=bool) if waking is None else np.asarray(waking)
    tx = np.zeros((n, 1)) if tx is None else np.asarray(tx)
    served = np.zeros(n, dtype=int) if served is None else np.asarray(served)
    return network_power(antennas, np.asarray(modes), waking, tx, served, active_ues, 1.0, params)


def test_breakdown_sums_bit_exactly():
    b = _network([8, 4, 0, 8], [0, 1, 2, 3], tx=np.array([[1.0], [0.0], [0.0], [0.0]]),
                 served=[3, 0, 0, 0], active_ues=3)
    assert b.total == float(np.sum(b.per_ap)) + b.cloud
    assert b.ap_total == float(np.sum(b.per_ap))


def test_all_deep_sleep_is_the_floor():
    b = _network([8] * 4, [3] * 4)
    assert np.allclose(b.per_ap, 0.23 * _idle(8))
    assert b.cloud == pytest.approx(cloud_power(0.0, P))
    assert b.total < _network([8] * 4, [2] * 4).total


def test_single_ap_network_is_additive():
    tx = np.array([[0.75, 0.25]])
    b = _network([4], [0], tx=tx, served=[2], active_ues=2)
    gops = float(ap_gops(4, 2, 1.0, P))
    expected_ap = ap_power(4, tx[0], gops, 0, P)
    assert b.per_ap[0] == expected_ap
    assert b.total == expected_ap + cloud_power(20.0 * 2, P)


def test_extra_antenna_increases_total():
    low = _network([4, 4], [0, 0])
    high = _network([5, 4], [0, 0])
    assert high.total > low.total


def test_waking_ap_billed_at_active_idle_power():
    b = _network([6, 6], [0, 0], waking=[True, False])
    assert b.per_ap[0] == pytest.approx(waking_ap_power(6, P))
    assert b.per_ap[0] == pytest.approx(_idle(6))


def test_cloud_overload_flagged_and_capped():
    b = _network([8], [0], active_ues=1000)
    assert b.cloud_overload
    assert b.cloud == pytest.approx(cloud_power(P.cloud_gops_max, P))
    assert not _network([8], [0], active_ues=5).cloud_overload


def test_neutral_discounts_make_sleep_free_of_effect():
    neutral = PowerParams(sleep_discounts=(1.0, 1.0, 1.0, 1.0), sleep_latencies=(0.0, 0.0, 0.0, 0.0))
    powers = {ap_power(8, np.zeros(0), neutral.ap_gops_idle, s, neutral) for s in range(4)}
    assert len(powers) == 1
