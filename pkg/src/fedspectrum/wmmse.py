"""WMMSE power allocation with exhaustive channel-assignment search.

``gains[k, j]`` is ``|h_kj|^2``, the gain from transmitter ``j`` to receiver
``k``.  Users on different channels must have zero mutual gain; with that
convention one joint WMMSE run over all ``K`` users is the same as separate
runs per channel, because the updates decouple.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .env import NetworkConfig, NetworkState
from .errors import BudgetExceededError, InvalidParameterError


@dataclass
class WmmseIterate:
    v: np.ndarray
    u: np.ndarray
    w: np.ndarray
    e: np.ndarray


@dataclass
class WmmseResult:
    powers: np.ndarray
    sum_rate: float
    converged: bool
    iterations: int
    objective: list = field(default_factory=list)
    final: WmmseIterate | None = None


@dataclass
class BenchmarkResult:
    assignment: np.ndarray
    powers: np.ndarray
    sum_rate: float
    n_solves: int


def sum_rate_from_powers(gains, powers, sigma2) -> float:
    """``sum_k log2(1 + SINR_k)`` for a co-channel gain matrix and continuous powers."""
    gains = np.asarray(gains, dtype=float)
    p = np.asarray(powers, dtype=float)
    rx = gains * p[None, :]
    signal = np.diagonal(rx)
    interference = rx.sum(axis=1) - signal
    return float(np.sum(np.log2(1.0 + signal / (interference + sigma2))))


def _mse(amp, v, u, sigma2):
    # e_k = (u_k |h_kk| v_k - 1)^2 + sum_{j != k} (u_k |h_kj| v_j)^2 + sigma_k^2 u_k^2
    direct = np.diagonal(amp)
    total = (amp**2 * v[None, :] ** 2).sum(axis=1)
    cross = total - direct**2 * v**2
    return (u * direct * v - 1.0) ** 2 + u**2 * cross + sigma2 * u**2


def _receiver(amp, v, sigma2):
    direct = np.diagonal(amp)
    u = direct * v / ((amp**2 * v[None, :] ** 2).sum(axis=1) + sigma2)
    w = 1.0 / (1.0 - u * direct * v)
    return u, w


def _wmmse_run(g, amp, v, Pmax, sigma2, tol, max_iter):
    direct = np.diagonal(amp)
    vmax = np.sqrt(Pmax)
    u, w = _receiver(amp, v, sigma2)
    objective = [float(np.sum(w * _mse(amp, v, u, sigma2) - np.log(w)))]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v_prev = v
        num = w * u * direct
        den = ((w * u**2)[:, None] * g).sum(axis=0)  # sum_j w_j u_j^2 |h_jk|^2
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(den > 0, num / den, np.where(num > 0, vmax, 0.0))
        v = np.clip(v, 0.0, vmax)
        u, w = _receiver(amp, v, sigma2)
        objective.append(float(np.sum(w * _mse(amp, v, u, sigma2) - np.log(w))))
        if np.max(np.abs(v - v_prev)) < tol:
            converged = True
            break
    return v, u, w, objective, converged, it


def coupled_groups(gains) -> list[np.ndarray]:
    """Connected components of the interference graph (users linked by nonzero cross gain)."""
    g = np.asarray(gains) > 0
    link = g | g.T
    K = len(g)
    label = -np.ones(K, dtype=np.int64)
    groups = []
    for s in range(K):
        if label[s] >= 0:
            continue
        stack, members = [s], []
        label[s] = len(groups)
        while stack:
            k = stack.pop()
            members.append(k)
            for j in np.flatnonzero(link[k]):
                if label[j] < 0:
                    label[j] = len(groups)
                    stack.append(j)
        groups.append(np.array(sorted(members)))
    return groups


def _starts(n, vmax, init, max_corners, rng):
    if init == "full":
        yield np.full(n, vmax)
        return
    if init == "random":
        yield rng.uniform(0.0, vmax, n)
        return
    # "multistart": full power first, then every on/off corner (or seeded draws if too many)
    yield np.full(n, vmax)
    if 2**n - 1 <= max_corners:
        for mask in range(1, 2**n - 1):
            yield vmax * ((mask >> np.arange(n)) & 1).astype(float)
    else:
        for _ in range(16):
            yield vmax * (rng.random(n) < 0.5) * rng.uniform(0.5, 1.0, n)


def wmmse_power(gains, Pmax: float, sigma2, tol: float = 1e-6, max_iter: int = 500,
                init: str = "multistart", rng: np.random.Generator | None = None,
                max_corners: int = 255) -> WmmseResult:
    """Block-coordinate WMMSE for ``max sum log(1 + SINR)`` s.t. ``0 <= p_k <= Pmax``.

    Each group of mutually interfering users is solved on its own.  With
    ``init="full"`` a group starts from full power only; ``"random"`` draws
    one seeded start; ``"multistart"`` (default) also starts from every on/off
    power corner and keeps the best run; groups with more than
    ``log2(max_corners + 1)`` users get 16 seeded random on/off starts instead.  A run stops when the largest
    amplitude change drops below ``tol``; a run that hits ``max_iter`` keeps
    its last iterate and clears ``converged``.  The reported sum-rate is
    recomputed from the returned powers in bits.
    """
    g = np.asarray(gains, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise InvalidParameterError("gains must be a square matrix")
    if np.any(g < 0):
        raise InvalidParameterError("gains must be nonnegative")
    if init not in ("full", "random", "multistart"):
        raise InvalidParameterError(f"unknown init {init!r}")
    K = g.shape[0]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (K,))
    rng = rng if rng is not None else np.random.default_rng(0)
    vmax = np.sqrt(Pmax)

    v_all, u_all, w_all = np.zeros(K), np.zeros(K), np.ones(K)
    converged, iterations, objective = True, 0, []
    for members in coupled_groups(g):
        gs = g[np.ix_(members, members)]
        amp = np.sqrt(gs)
        s2 = sigma2[members]
        best = None
        for v0 in _starts(len(members), vmax, init, max_corners, rng):
            run = _wmmse_run(gs, amp, v0, Pmax, s2, tol, max_iter)
            rate = sum_rate_from_powers(gs, run[0] ** 2, s2)
            if best is None or rate > best[0]:
                best = (rate, run)
        v, u, w, obj, conv, it = best[1]
        v_all[members], u_all[members], w_all[members] = v, u, w
        converged &= conv
        iterations = max(iterations, it)
        objective.append(obj)

    powers = np.minimum(v_all**2, Pmax)
    amp = np.sqrt(g)
    final = WmmseIterate(v_all, u_all, w_all, _mse(amp, v_all, u_all, sigma2))
    return WmmseResult(powers, sum_rate_from_powers(g, powers, sigma2), converged, iterations,
                       objective, final)


def assignment_gains(gains: np.ndarray, assignment) -> np.ndarray:
    """Co-channel ``K x K`` gain matrix for a channel assignment; cross-channel entries are 0."""
    ch = np.asarray(assignment, dtype=np.int64)
    K = len(ch)
    g = gains[ch, np.arange(K)]  # row k taken from user k's channel
    return g * (ch[:, None] == ch[None, :])


def _assignments(Nc: int, K: int):
    return itertools.product(range(Nc), repeat=K)


def exhaustive_benchmark(state: NetworkState, config: NetworkConfig, budget: int = 4096,
                         tol: float = 1e-6, max_iter: int = 500, init: str = "multistart",
                         seed=None) -> BenchmarkResult:
    """Best channel assignment over all ``Nc**K`` schemes with WMMSE powers in each.

    Ties go to the lexicographically smallest assignment.
    """
    K, Nc = config.K, config.Nc
    if Nc**K > budget:
        raise BudgetExceededError(
            f"{Nc}^{K} = {Nc**K} channel assignments exceed the budget of {budget}; "
            "use sampled_benchmark() instead")
    gains = state.gains
    rng = np.random.default_rng(seed)
    best = None
    n = 0
    for a in _assignments(Nc, K):
        res = wmmse_power(assignment_gains(gains, a), config.Pmax, config.sigma2,
                          tol, max_iter, init, rng)
        n += 1
        if best is None or res.sum_rate > best.sum_rate:
            best = BenchmarkResult(np.array(a), res.powers, res.sum_rate, 0)
    best.n_solves = n
    return best


def sampled_benchmark(state: NetworkState, config: NetworkConfig, n_samples: int,
                      seed=None, tol: float = 1e-6, max_iter: int = 500) -> BenchmarkResult:
    """Random-search variant of :func:`exhaustive_benchmark` for large ``Nc**K``."""
    rng = np.random.default_rng(seed)
    gains = state.gains
    seen = set()
    best = None
    for _ in range(n_samples):
        a = tuple(int(c) for c in rng.integers(0, config.Nc, config.K))
        if a in seen:
            continue
        seen.add(a)
        res = wmmse_power(assignment_gains(gains, a), config.Pmax, config.sigma2, tol, max_iter)
        if best is None or res.sum_rate > best.sum_rate or (
                res.sum_rate == best.sum_rate and a < tuple(best.assignment)):
            best = BenchmarkResult(np.array(a), res.powers, res.sum_rate, 0)
    best.n_solves = len(seen)
    return best


def grid_search_power(gains, Pmax: float, sigma2, points: int = 200, chunk: int = 1 << 20):
    """Brute-force maximum of the sum-rate over a uniform ``points``-per-user power grid."""
    g = np.asarray(gains, dtype=float)
    K = g.shape[0]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (K,))
    grid = np.linspace(0.0, Pmax, points)
    best_rate, best_p = -np.inf, None
    total = points**K
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        P = np.empty((len(idx), K))
        rem = idx
        for k in range(K - 1, -1, -1):
            P[:, k] = grid[rem % points]
            rem = rem // points
        rx = P[:, None, :] * g[None, :, :]  # rx[b, k, j]
        signal = P * np.diagonal(g)[None, :]
        interference = rx.sum(axis=2) - signal
        r = np.log2(1.0 + signal / (interference + sigma2[None, :])).sum(axis=1)
        i = int(np.argmax(r))
        if r[i] > best_rate:
            best_rate, best_p = float(r[i]), P[i].copy()
    return best_p, best_rate


def brute_force_benchmark(state: NetworkState, config: NetworkConfig, points: int = 200):
    """Oracle: every channel assignment crossed with a power grid; returns ``(assignment, powers, rate)``."""
    gains = state.gains
    best = (None, None, -np.inf)
    for a in _assignments(config.Nc, config.K):
        g = assignment_gains(gains, a)
        # users on different channels do not interact, so search each channel's grid separately
        ch = np.array(a)
        p = np.zeros(config.K)
        rate = 0.0
        for c in np.unique(ch):
            members = np.flatnonzero(ch == c)
            pc, rc = grid_search_power(g[np.ix_(members, members)], config.Pmax,
                                       config.sigma2, points)
            p[members] = pc
            rate += rc
        if rate > best[2]:
            best = (ch, p, rate)
    return best
