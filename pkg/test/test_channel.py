"""Path loss, pilot assignment, estimate gains and user-centric clusters."""

import math

import numpy as np
import pytest

from cellfree_sleep.channel import (
    assign_pilots,
    build_clusters,
    build_large_scale,
    draw_shadowing,
    estimate_gains,
    large_scale_gain,
    pathloss_db,
)
from cellfree_sleep.config import ScenarioConfig, ap_positions


def _random_instance(rng, num_aps=6, num_ues=10, tau_p=4):
    cfg = ScenarioConfig()
    ue_xy = rng.uniform(0.0, 1.0, size=(num_ues, 2))
    ap_xy = rng.uniform(0.0, 1.0, size=(num_aps, 2))
    shadow = draw_shadowing(rng, num_aps, num_ues, cfg.shadow_std_db)
    beta = build_large_scale(cfg, ap_xy, ue_xy, shadow).beta
    pilots = assign_pilots(beta, tau_p)
    chi = estimate_gains(beta, pilots, cfg.pilot_power, tau_p, cfg.sigma2).chi
    return beta, pilots, chi


def test_umi_nlos_pathloss_at_100m():
    expected = 35.3 * 2 + 22.4 + 21.3 * math.log10(5)
    assert pathloss_db(100.0, 5e9) == pytest.approx(expected, abs=1e-12)


def test_gain_uses_3d_distance():
    cfg = ScenarioConfig()
    gain = large_scale_gain(np.array([0.0, 0.0]), np.array([0.1, 0.0]), 0.0, cfg)
    d3d = math.hypot(100.0, 8.5)
    assert gain == pytest.approx(10 ** (-pathloss_db(d3d, 5e9) / 10), rel=1e-12)


def test_gain_monotone_and_shadow_additive():
    cfg = ScenarioConfig()
    ap = np.array([0.5, 0.5])
    near = large_scale_gain(ap, np.array([0.6, 0.5]), 0.0, cfg)
    far = large_scale_gain(ap, np.array([0.7, 0.5]), 0.0, cfg)
    shadowed = large_scale_gain(ap, np.array([0.6, 0.5]), 10.0, cfg)
    assert far < near
    assert near / shadowed == pytest.approx(10.0, rel=1e-12)


def test_distance_below_one_metre_is_clamped():
    assert pathloss_db(0.2, 5e9) == pathloss_db(1.0, 5e9)


def test_large_scale_table_shape_and_positivity(rng):
    cfg = ScenarioConfig()
    ue_xy = rng.uniform(0.0, 1.0, size=(7, 2))
    shadow = draw_shadowing(rng, cfg.num_aps, 7, cfg.shadow_std_db)
    table = build_large_scale(cfg, ap_positions(cfg), ue_xy, shadow)
    assert table.beta.shape == (25, 7)
    assert np.all(table.beta > 0) and np.all(np.isfinite(table.beta))


def test_orthogonal_pilots_when_enough():
    beta = np.ones((4, 3))
    pilots = assign_pilots(beta, 7)
    assert sorted(pilots.pilot_of.tolist()) == [0, 1, 2]
    for k in range(3):
        assert pilots.cocontaminators(k).tolist() == [k]


def test_eight_ues_on_seven_pilots_share_exactly_one(rng):
    beta = rng.uniform(0.1, 1.0, size=(5, 8))
    pilots = assign_pilots(beta, 7)
    counts = np.bincount(pilots.pilot_of, minlength=7)
    assert counts.max() == 2
    assert (counts == 2).sum() == 1


def test_greedy_picks_least_contaminated_pilot():
    # UE 2 has its strongest AP at row 0; pilot 1's user is weaker there.
    beta = np.array([[0.9, 0.1, 1.0],
                     [0.1, 0.9, 0.2]])
    pilots = assign_pilots(beta, 2)
    assert pilots.pilot_of.tolist() == [0, 1, 1]


def test_existing_pilots_are_kept(rng):
    beta = rng.uniform(0.1, 1.0, size=(3, 5))
    pilots = assign_pilots(beta, 3, existing=np.array([2, 0]))
    assert pilots.pilot_of[:2].tolist() == [2, 0]
    assert pilots.pilot_of[2] == 1


def test_pilot_relation_is_symmetric(rng):
    _, pilots, _ = _random_instance(rng)
    same = pilots.same_pilot
    assert np.array_equal(same, same.T)
    assert np.all(np.diag(same))
    assert np.unique(pilots.pilot_of).size <= 4


def test_estimate_gain_bounded_by_beta(rng):
    for _ in range(20):
        beta, _, chi = _random_instance(rng)
        assert np.all(chi > 0)
        assert np.all(chi <= beta)


def test_estimate_gain_high_snr_limit():
    beta = np.array([[1e-6]])
    pilots = assign_pilots(beta, 1)
    chi = estimate_gains(beta, pilots, 0.1, 1, 1e-20).chi
    assert chi[0, 0] == pytest.approx(1e-6, rel=1e-9)


def test_estimate_gain_equal_split_contamination():
    beta = np.array([[1e-6, 1e-6]])
    pilots = assign_pilots(beta, 1)
    chi = estimate_gains(beta, pilots, 0.1, 1, 1e-30).chi
    assert np.allclose(chi, 0.5e-6, rtol=1e-9)


def test_cluster_prefix_rule():
    beta = np.array([[0.5], [0.4], [0.1]])
    pilots = assign_pilots(beta, 1)
    chi = beta * 0.9
    clusters = build_clusters(beta, chi, pilots, 0.9, np.full(3, 8), 1, 0.5)
    assert clusters.requested_aps(0).tolist() == [0, 1]
    full = build_clusters(beta, chi, pilots, 1.0, np.full(3, 8), 1, 0.5)
    assert sorted(full.requested_aps(0).tolist()) == [0, 1, 2]


def test_clusters_are_minimal_prefixes(rng):
    beta, pilots, chi = _random_instance(rng)
    clusters = build_clusters(beta, chi, pilots, 0.9, np.full(6, 8), 4, 0.5)
    for k in range(beta.shape[1]):
        aps = clusters.requested_aps(k)
        total = beta[:, k].sum()
        assert beta[aps, k].sum() >= 0.9 * total * (1 - 1e-12)
        assert beta[aps[:-1], k].sum() < 0.9 * total
        assert np.all(np.diff(beta[aps, k]) <= 0), "cluster must be in descending-gain order"


def test_serving_duality_and_sleeping_aps(rng):
    beta, pilots, chi = _random_instance(rng)
    available = np.array([True, False, True, True, False, True])
    clusters = build_clusters(beta, chi, pilots, 0.9, np.full(6, 8), 4, 0.5, available=available)
    for l in range(6):
        for k in range(beta.shape[1]):
            assert (k in clusters.served_ues(l)) == (l in clusters.serving_aps(k))
    assert not clusters.serving[~available].any()
    assert np.array_equal(clusters.serving, clusters.request & available[:, None])


def test_strong_set_respects_antenna_cap(rng):
    beta, pilots, chi = _random_instance(rng, num_ues=10, tau_p=4)
    antennas = np.array([0, 1, 2, 3, 8, 8])
    clusters = build_clusters(beta, chi, pilots, 1.0, antennas, 4, 0.0)
    for l in range(6):
        assert clusters.tau_str[l] <= max(min(4, antennas[l] - 1), 0)
        assert not (clusters.strong[l] & ~clusters.serving[l]).any()
    assert clusters.tau_str[0] == 0 and clusters.tau_str[1] == 0
    assert not clusters.strong[:2].any()
    assert clusters.tau_str[4] == 4, "threshold 0 with 10 served UEs on 4 pilots fills the cap"
