"""K-pair interference network: fading channels, SINR, feedback and observations.

Indices are 0-based throughout: channel ``c`` is in ``range(Nc)``, power level
``p`` is in ``range(Np)`` with ``p = 0`` the zero-power level.  The flat action
index used by the agents is ``0`` for "no transmission" and
``1 + c * n_power_actions + (p - p_offset)`` otherwise.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError

# 38 dBm against unit noise power.
PMAX_38DBM = 10.0 ** (38.0 / 10.0)


class RewardMode(str, enum.Enum):
    INDIVIDUAL = "individual"
    SUM = "sum"
    SUM_LOG = "sumlog"


@dataclass(frozen=True)
class NetworkConfig:
    """Static description of the interference network.

    ``reduced_actions`` drops the redundant "transmit at zero power" actions,
    giving ``Nc * (Np - 1) + 1`` actions instead of ``Nc * Np + 1``.
    """

    K: int = 6
    Nc: int = 2
    Np: int = 5
    M: int = 10
    Pmax: float = PMAX_38DBM
    sigma2: float = 1.0
    T_hist: int = 5
    T_threshold: float = 1.0
    rho: float = 1.0
    T_v: int = 2000
    eps_rate: float = 1e-6
    reduced_actions: bool = False

    def __post_init__(self):
        checks = [
            ("K", self.K >= 1),
            ("Nc", self.Nc >= 1),
            ("Np", self.Np >= 2),
            ("M", self.M >= 1),
            ("Pmax", self.Pmax > 0),
            ("sigma2", self.sigma2 > 0),
            ("T_hist", self.T_hist >= 1),
            ("T_threshold", self.T_threshold > 0),
            ("rho", 0.0 <= self.rho <= 1.0),
            ("T_v", self.T_v >= 1),
            ("eps_rate", self.eps_rate > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise InvalidParameterError(f"{name}={getattr(self, name)!r} is out of range")

    @property
    def obs_width(self) -> int:
        return 1 + self.Nc + self.Np + self.M

    @property
    def power_offset(self) -> int:
        return 1 if self.reduced_actions else 0

    @property
    def n_power_actions(self) -> int:
        return self.Np - self.power_offset

    @property
    def n_actions(self) -> int:
        return self.Nc * self.n_power_actions + 1

    @property
    def power_levels(self) -> np.ndarray:
        return np.arange(self.Np) / (self.Np - 1) * self.Pmax

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


@dataclass
class NetworkState:
    """Fading coefficients ``h[n, k, j]``: channel ``n``, receiver ``k``, transmitter ``j``."""

    h: np.ndarray
    slot: int = 0

    @property
    def gains(self) -> np.ndarray:
        return np.abs(self.h) ** 2

    def copy(self) -> "NetworkState":
        return NetworkState(self.h.copy(), self.slot)


@dataclass
class JointAction:
    transmit: np.ndarray
    channel: np.ndarray
    power_level: np.ndarray

    def __post_init__(self):
        self.transmit = np.asarray(self.transmit, dtype=bool)
        self.channel = np.asarray(self.channel, dtype=np.int64)
        self.power_level = np.asarray(self.power_level, dtype=np.int64)

    @property
    def K(self) -> int:
        return len(self.transmit)

    def validate(self, config: NetworkConfig):
        if not (len(self.channel) == len(self.power_level) == self.K == config.K):
            raise InvalidParameterError("joint action must have one entry per user")
        tx = self.transmit
        if np.any((self.channel[tx] < 0) | (self.channel[tx] >= config.Nc)):
            raise InvalidParameterError("channel index out of range")
        if np.any((self.power_level[tx] < 0) | (self.power_level[tx] >= config.Np)):
            raise InvalidParameterError("power level index out of range")

    def powers(self, config: NetworkConfig) -> np.ndarray:
        levels = np.clip(self.power_level, 0, config.Np - 1)
        return np.where(self.transmit, config.power_levels[levels], 0.0)


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def init_network(config: NetworkConfig, seed) -> NetworkState:
    """Draw ``Nc`` independent ``K x K`` CN(0, 1) fading matrices."""
    rng = np.random.default_rng(seed)
    return NetworkState(complex_normal(rng, (config.Nc, config.K, config.K)), 0)


def jakes_step(state: NetworkState, rho: float, rng: np.random.Generator) -> NetworkState:
    """One first-order Gauss-Markov update ``h <- rho h + e``, ``e ~ CN(0, 1 - rho^2)``."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidParameterError(f"rho={rho!r} must lie in [0, 1]")
    if rho == 1.0:
        return NetworkState(state.h.copy(), state.slot + 1)
    h = rho * state.h + complex_normal(rng, state.h.shape, 1.0 - rho * rho)
    return NetworkState(h, state.slot + 1)


def _j0_series(x: float) -> float:
    q = -0.25 * x * x
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if abs(term) < 1e-17 * max(1.0, abs(total)):
            return total


def _j0_asymptotic(x: float) -> float:
    # Hankel expansion; truncated at the smallest term.
    p, q = 0.0, 0.0
    term = 1.0  # |a_k| / x^k
    k = 0
    prev = math.inf
    while term < prev and k < 200:
        prev = term
        if k % 2 == 0:
            p += (-1) ** (k // 2) * term
        else:
            q -= (-1) ** (k // 2) * term
        term *= (2 * k + 1) ** 2 / (8.0 * (k + 1) * x)
        k += 1
    chi = x - math.pi / 4.0
    return math.sqrt(2.0 / (math.pi * x)) * (p * math.cos(chi) - q * math.sin(chi))


def bessel_j0(x: float) -> float:
    """Zeroth-order Bessel function of the first kind."""
    x = abs(float(x))
    if not math.isfinite(x):
        raise InvalidParameterError("bessel_j0 needs a finite argument")
    if x <= 12.0:
        return _j0_series(x)
    return _j0_asymptotic(x)


def jakes_rho(doppler_hz: float, interval_s: float) -> float:
    """Correlation ``J0(2 pi f_d T)`` for a Doppler frequency and a variation interval."""
    return bessel_j0(2.0 * math.pi * doppler_hz * interval_s)


def compute_sinr(state: NetworkState, action: JointAction, config: NetworkConfig) -> np.ndarray:
    """Per-user linear SINR; co-channel transmitters interfere, idle users get 0."""
    action.validate(config)
    K = config.K
    p = action.powers(config)
    ch = np.where(action.transmit, action.channel, 0)
    g = state.gains[ch, np.arange(K)]  # g[k, j] = |h_kj|^2 on user k's channel
    same = (ch[:, None] == ch[None, :]) & action.transmit[None, :]
    np.fill_diagonal(same, False)
    interference = (g * same * p[None, :]).sum(axis=1)
    signal = p * np.diagonal(g)
    return np.where(action.transmit, signal / (interference + config.sigma2), 0.0)


def quantize_feedback(sinr, T_threshold: float, M: int):
    """``floor(sinr / T)`` saturated at ``2**M - 1``; works on scalars and arrays."""
    s = np.asarray(sinr, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise InvalidParameterError("SINR must be nonnegative")
    n = np.minimum(np.floor(s / T_threshold), 2**M - 1).astype(np.int64)
    return int(n) if n.ndim == 0 else n


def encode_observation(config: NetworkConfig, transmit: bool, channel: int,
                       power_level: int, feedback: int) -> np.ndarray:
    """Binary vector ``[idle | channel one-hot | power one-hot | M feedback bits]``."""
    x = np.zeros(config.obs_width, dtype=np.uint8)
    if not transmit:
        x[0] = 1
        return x
    if not 0 <= channel < config.Nc:
        raise InvalidParameterError(f"channel {channel} out of range")
    if not 0 <= power_level < config.Np:
        raise InvalidParameterError(f"power level {power_level} out of range")
    if not 0 <= feedback < 2**config.M:
        raise InvalidParameterError(f"feedback {feedback} needs more than {config.M} bits")
    x[1 + channel] = 1
    x[1 + config.Nc + power_level] = 1
    bits = (feedback >> np.arange(config.M - 1, -1, -1)) & 1
    x[1 + config.Nc + config.Np:] = bits
    return x


def encode_observations(config: NetworkConfig, action: JointAction, feedback) -> np.ndarray:
    """Vectorised :func:`encode_observation` for all users, shape ``(K, obs_width)``."""
    K = config.K
    fb = np.asarray(feedback, dtype=np.int64)
    x = np.zeros((K, config.obs_width), dtype=np.uint8)
    idx = np.arange(K)
    tx = action.transmit
    x[idx[~tx], 0] = 1
    x[idx[tx], 1 + action.channel[tx]] = 1
    x[idx[tx], 1 + config.Nc + action.power_level[tx]] = 1
    shifts = np.arange(config.M - 1, -1, -1)
    x[:, 1 + config.Nc + config.Np:] = ((fb[:, None] >> shifts) & 1) * tx[:, None]
    return x


def decode_observation(config: NetworkConfig, x) -> tuple[bool, int, int, int]:
    """Inverse of :func:`encode_observation`: ``(transmit, channel, power_level, feedback)``."""
    x = np.asarray(x)
    if x[0] == 1:
        return False, -1, -1, 0
    channel = int(np.argmax(x[1:1 + config.Nc]))
    power_level = int(np.argmax(x[1 + config.Nc:1 + config.Nc + config.Np]))
    feedback = 0
    for b in x[1 + config.Nc + config.Np:]:
        feedback = (feedback << 1) | int(b)
    return True, channel, power_level, feedback


def rates(sinrs) -> np.ndarray:
    return np.log2(1.0 + np.asarray(sinrs, dtype=float))


def sum_log_rate(sinrs, eps_rate: float = 1e-6) -> float:
    r = rates(sinrs)
    return float(np.sum(np.log(np.where(r <= eps_rate, eps_rate, r))))


def compute_reward(sinrs, mode: RewardMode, eps_rate: float = 1e-6):
    """Rate-based reward.  Near-silent users contribute ``ln(eps_rate)`` to the sum-log-rate."""
    mode = RewardMode(mode)
    if mode is RewardMode.INDIVIDUAL:
        return rates(sinrs)
    if mode is RewardMode.SUM:
        return float(np.sum(rates(sinrs)))
    return sum_log_rate(sinrs, eps_rate)


def action_to_joint(indices, config: NetworkConfig) -> JointAction:
    """Map flat per-user action indices to a :class:`JointAction`."""
    a = np.asarray(indices, dtype=np.int64)
    if np.any((a < 0) | (a >= config.n_actions)):
        raise InvalidParameterError("action index out of range")
    tx = a > 0
    rest = np.maximum(a - 1, 0)
    channel = rest // config.n_power_actions
    power = rest % config.n_power_actions + config.power_offset
    return JointAction(tx, np.where(tx, channel, 0), np.where(tx, power, 0))


def joint_to_action(joint: JointAction, config: NetworkConfig) -> np.ndarray:
    flat = 1 + joint.channel * config.n_power_actions + joint.power_level - config.power_offset
    return np.where(joint.transmit, flat, 0)


class StepResult(NamedTuple):
    observations: np.ndarray
    reward: object
    sinrs: np.ndarray
    state: NetworkState
    feedback: np.ndarray


def step(state: NetworkState, action: JointAction, mode: RewardMode,
         rng: np.random.Generator, config: NetworkConfig) -> StepResult:
    """Play one slot on ``state`` and advance the channel.

    The channel varies (one Jakes update with ``config.rho``) whenever the new
    slot index is a multiple of ``config.T_v``; otherwise it is held fixed.
    """
    sinrs = compute_sinr(state, action, config)
    feedback = quantize_feedback(sinrs, config.T_threshold, config.M)
    obs = encode_observations(config, action, feedback)
    reward = compute_reward(sinrs, mode, config.eps_rate)
    if (state.slot + 1) % config.T_v == 0:
        nxt = jakes_step(state, config.rho, rng)
    else:
        nxt = NetworkState(state.h, state.slot + 1)
    return StepResult(obs, reward, sinrs, nxt, np.atleast_1d(feedback))
