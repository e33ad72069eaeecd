import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedspectrum.env import NetworkConfig, NetworkState, init_network
from fedspectrum.errors import BudgetExceededError, InvalidParameterError
from fedspectrum.wmmse import (assignment_gains, brute_force_benchmark, coupled_groups,
                               exhaustive_benchmark, grid_search_power, sampled_benchmark,
                               sum_rate_from_powers, wmmse_power)


def state_from_gains(gains):
    return NetworkState(np.sqrt(np.asarray(gains, dtype=float)).astype(complex))


def test_single_user_full_power():
    res = wmmse_power([[1.0]], Pmax=4.0, sigma2=1.0)
    np.testing.assert_allclose(res.powers, [4.0])
    assert res.sum_rate == pytest.approx(math.log2(5.0))
    assert res.converged


@pytest.mark.parametrize("pmax", [10.0, 10**3.8])
def test_symmetric_pair_matches_grid(pmax):
    g = np.array([[1.0, 10.0], [10.0, 1.0]])
    res = wmmse_power(g, pmax, 1.0)
    _, grid_rate = grid_search_power(g, pmax, 1.0, points=200)
    assert res.sum_rate >= 0.99 * grid_rate


def test_full_power_start_is_only_local():
    # the symmetric point is stationary, so a single full-power run cannot break symmetry
    g = np.array([[1.0, 10.0], [10.0, 1.0]])
    single = wmmse_power(g, 10.0, 1.0, init="full")
    multi = wmmse_power(g, 10.0, 1.0)
    assert single.powers[0] == pytest.approx(single.powers[1])
    assert multi.sum_rate > single.sum_rate


@pytest.mark.parametrize("seed", range(5))
def test_objective_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    g = rng.exponential(size=(3, 3))
    for init in ("full", "random"):
        res = wmmse_power(g, 100.0, 1.0, init=init, rng=rng)
        for trace in res.objective:
            assert np.all(np.diff(trace) <= 1e-9)


def test_mmse_sinr_equality_at_optimum():
    rng = np.random.default_rng(4)
    g = rng.exponential(size=(3, 3))
    res = wmmse_power(g, 50.0, 1.0, init="full")
    p = res.powers
    signal = np.diagonal(g) * p
    sinr = signal / (g @ p - signal + 1.0)
    np.testing.assert_allclose(res.final.e, 1.0 / (1.0 + sinr), rtol=1e-10)
    assert np.all(res.final.w >= 1.0)


def test_box_constraint():
    rng = np.random.default_rng(9)
    for _ in range(20):
        g = rng.exponential(size=(4, 4)) * 10
        res = wmmse_power(g, 3.0, 0.5)
        assert np.all(res.powers >= 0.0) and np.all(res.powers <= 3.0)


def test_invalid_gains():
    with pytest.raises(InvalidParameterError):
        wmmse_power([[-1.0]], 1.0, 1.0)
    with pytest.raises(InvalidParameterError):
        wmmse_power([[1.0, 0.0]], 1.0, 1.0)


def test_nonconvergence_flagged():
    g = np.array([[1.0, 0.3], [0.2, 1.0]])
    res = wmmse_power(g, 100.0, 1.0, max_iter=1, tol=0.0, init="full")
    assert not res.converged
    assert res.iterations == 1


def test_coupled_groups():
    g = np.array([[1, 0, 2], [0, 1, 0], [0, 0, 1]], dtype=float)
    assert [m.tolist() for m in coupled_groups(g)] == [[0, 2], [1]]


def test_assignment_gains_masks_other_channels():
    gains = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    g = assignment_gains(gains, [0, 1, 0])
    assert g[0, 1] == 0 and g[1, 0] == 0
    assert g[0, 2] == gains[0, 0, 2]
    assert g[1, 1] == gains[1, 1, 1]


class TestExhaustive:
    def test_strong_interference_separates_users(self):
        g = np.ones((2, 2, 2)) * 100.0
        for n in range(2):
            np.fill_diagonal(g[n], 1.0)
        cfg = NetworkConfig(K=2, Nc=2, Pmax=10.0)
        s = state_from_gains(g)
        best = exhaustive_benchmark(s, cfg)
        assert best.assignment[0] != best.assignment[1]
        oracle_assign, _, oracle_rate = brute_force_benchmark(s, cfg)
        assert oracle_assign[0] != oracle_assign[1]
        assert best.sum_rate >= 0.99 * oracle_rate

    def test_solve_count(self):
        cfg = NetworkConfig(K=6, Nc=2)
        assert exhaustive_benchmark(init_network(cfg, 0), cfg).n_solves == 64

    def test_single_channel_degenerates(self):
        cfg = NetworkConfig(K=3, Nc=1, Pmax=20.0)
        s = init_network(cfg, 2)
        best = exhaustive_benchmark(s, cfg)
        assert best.n_solves == 1
        direct = wmmse_power(s.gains[0], cfg.Pmax, cfg.sigma2)
        assert best.sum_rate == direct.sum_rate
        np.testing.assert_array_equal(best.assignment, [0, 0, 0])

    def test_budget(self):
        cfg = NetworkConfig(K=13, Nc=2)
        with pytest.raises(BudgetExceededError, match="sampled"):
            exhaustive_benchmark(init_network(cfg, 0), cfg)
        res = sampled_benchmark(init_network(cfg, 0), cfg, n_samples=20, seed=1)
        assert res.assignment.shape == (13,)

    def test_tie_break_lowest_assignment(self):
        # fully symmetric network: every assignment splitting users ties
        g = np.full((2, 2, 2), 5.0)
        for n in range(2):
            np.fill_diagonal(g[n], 1.0)
        cfg = NetworkConfig(K=2, Nc=2, Pmax=10.0)
        best = exhaustive_benchmark(state_from_gains(g), cfg)
        np.testing.assert_array_equal(best.assignment, [0, 1])

    def test_reported_rate_matches_powers(self):
        cfg = NetworkConfig(K=4, Nc=2)
        s = init_network(cfg, 11)
        best = exhaustive_benchmark(s, cfg)
        g = assignment_gains(s.gains, best.assignment)
        assert best.sum_rate == pytest.approx(sum_rate_from_powers(g, best.powers, 1.0))

    @settings(max_examples=6, deadline=None)
    @given(st.integers(0, 10**6))
    def test_oracle_dominance(self, seed):
        cfg = NetworkConfig(K=2, Nc=2, Pmax=30.0)
        s = init_network(cfg, seed)
        _, _, oracle = brute_force_benchmark(s, cfg, points=120)
        assert exhaustive_benchmark(s, cfg).sum_rate >= 0.99 * oracle

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10**6), st.permutations(range(4)))
    def test_permutation_equivariance(self, seed, perm):
        perm = np.array(perm)
        rng = np.random.default_rng(seed)
        g = rng.exponential(size=(4, 4))
        res = wmmse_power(g, 50.0, 1.0)
        res_p = wmmse_power(g[np.ix_(perm, perm)], 50.0, 1.0)
        np.testing.assert_allclose(res_p.powers, res.powers[perm], rtol=1e-6, atol=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, scale):
        cfg = NetworkConfig(K=3, Nc=2, Pmax=40.0, sigma2=1.0)
        s = init_network(cfg, seed)
        a = exhaustive_benchmark(s, cfg)
        scaled = NetworkState(s.h * math.sqrt(scale))
        b = exhaustive_benchmark(scaled, cfg.with_(sigma2=scale))
        np.testing.assert_array_equal(a.assignment, b.assignment)
        assert b.sum_rate == pytest.approx(a.sum_rate, rel=1e-6)
