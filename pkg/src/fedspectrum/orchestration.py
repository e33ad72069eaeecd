"""Training regimes (centralized, distributed, federated), the frozen-policy test
protocol, and information-exchange accounting.

All users act simultaneously in every slot.  A user's state is the window of
its last ``T_hist`` observations (zeros before the first slot).  Uploads are
simulated in-process; :class:`Counters` records what crossed the user/center
boundary so that regime isolation can be asserted.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import agents as ag
from . import neural as nn
from .env import (NetworkConfig, NetworkState, RewardMode, action_to_joint, init_network, rates,
                  step)
from .errors import InvalidParameterError
from .wmmse import exhaustive_benchmark

REGIMES = ("cdrl", "ddrl", "fdrl")
AGENT_KINDS = ("dqn", "ac")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "cdrl"
    agent: str = "dqn"
    reward: RewardMode = RewardMode.SUM
    T_max: int = 400000
    eps_max: float = 0.2
    eps_min: float = 0.01
    T_e: int = 320000
    test_epsilon: float = 0.1
    optimizer: str = "adam"
    alpha: float = 1e-3
    alpha_actor: float = 5e-4
    alpha_critic: float = 1e-3
    gamma: float = 0.9
    buffer_capacity: int = 600000
    batch_size: int = 12
    G: int = 2
    T_Fed: int = 100
    quant_bits: int = 0  # 0: upload full-precision parameters
    async_eps: bool = True  # FDRL: a user's epsilon clock runs only while it is in the group
    idle_policy: str = "frozen"  # FDRL users outside the group: "frozen" policy or "silent"
    ac_sample: bool = True
    target_period: int = 0
    benchmark: bool = True

    def __post_init__(self):
        object.__setattr__(self, "reward", RewardMode(self.reward))
        if self.regime not in REGIMES:
            raise InvalidParameterError(f"regime must be one of {REGIMES}")
        if self.agent not in AGENT_KINDS:
            raise InvalidParameterError(f"agent must be one of {AGENT_KINDS}")
        if self.T_max < 1:
            raise InvalidParameterError("T_max must be >= 1")
        if self.T_Fed < 1:
            raise InvalidParameterError("T_Fed must be >= 1")
        if self.G < 1:
            raise InvalidParameterError("G must be >= 1")
        if self.quant_bits and not 2 <= self.quant_bits <= 16:
            raise InvalidParameterError("quant_bits must be 0 or in [2, 16]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise InvalidParameterError("need 1 <= batch_size <= buffer_capacity")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidParameterError("gamma must lie in [0, 1)")
        if self.idle_policy not in ("frozen", "silent"):
            raise InvalidParameterError("idle_policy must be 'frozen' or 'silent'")
        if self.target_period < 0:
            raise InvalidParameterError("target_period must be >= 0")
        self.schedule  # validates the epsilon fields

    @property
    def schedule(self) -> ag.EpsilonSchedule:
        return ag.EpsilonSchedule(self.eps_max, self.eps_min, self.T_e, self.test_epsilon)

    @classmethod
    def defaults(cls, regime: str = "cdrl", **overrides) -> "TrainConfig":
        """Centralized runs use Adam settings; distributed and federated runs use SGD settings."""
        if regime == "cdrl":
            base = {}
        else:
            base = dict(optimizer="sgd", alpha=0.01, alpha_actor=0.001, alpha_critic=0.001,
                        eps_max=0.5, eps_min=0.05, T_e=500000, buffer_capacity=100000,
                        batch_size=2)
        return cls(regime=regime, **{**base, **overrides})

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class Counters:
    updates: int = 0
    skipped_updates: int = 0
    transitions_uploaded: int = 0
    param_uploads: int = 0
    bytes_uploaded: int = 0
    sync_rounds: int = 0
    sync_slots: list = field(default_factory=list)
    fedavg_calls: int = 0
    benchmark_solves: int = 0
    benchmark_slots: list = field(default_factory=list)


class MetricsLog:
    """Append-only per-slot records with a fixed column set.

    Columns: ``slot, sum_rate, sum_log_rate, epsilon, benchmark``, then
    ``rate_k``, ``channel_k`` (-1 when idle) and ``power_k`` (linear) per user.
    ``benchmark`` is NaN where none was computed.
    """

    BASE = ("slot", "sum_rate", "sum_log_rate", "epsilon", "benchmark")

    def __init__(self, K: int, capacity: int, meta: dict | None = None):
        self.K = K
        self.meta = dict(meta or {})
        self.columns = list(self.BASE) + [f"{p}_{k}" for p in ("rate", "channel", "power")
                                          for k in range(K)]
        self._data = np.full((capacity, len(self.columns)), np.nan)
        self._n = 0

    def __len__(self):
        return self._n

    def append(self, slot, rate_vec, channels, powers, epsilon, benchmark=math.nan, eps_rate=1e-6):
        if self._n and slot <= self._data[self._n - 1, 0]:
            raise InvalidParameterError("slot index must increase")
        if self._n == len(self._data):
            self._data = np.concatenate([self._data, np.full_like(self._data, np.nan)])
        r = np.asarray(rate_vec, dtype=float)
        row = self._data[self._n]
        row[0], row[1] = slot, r.sum()
        row[2] = np.sum(np.log(np.where(r <= eps_rate, eps_rate, r)))
        row[3], row[4] = epsilon, benchmark
        K = self.K
        row[5:5 + K], row[5 + K:5 + 2 * K], row[5 + 2 * K:] = r, channels, powers
        self._n += 1

    @property
    def data(self) -> np.ndarray:
        return self._data[:self._n]

    def column(self, name) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def block(self, prefix) -> np.ndarray:
        """``(slots, K)`` array of a per-user column family, e.g. ``"channel"``."""
        i = self.columns.index(f"{prefix}_0")
        return self.data[:, i:i + self.K]


@dataclass
class RunResult:
    log: MetricsLog
    models: list  # per user: DQN parameter vector, or (actor, critic)
    counters: Counters
    initial_state: NetworkState
    final_state: NetworkState
    global_model: object = None
    agents: list = field(default_factory=list)


# ---------------------------------------------------------------- helpers

def seed_streams(seed) -> dict:
    """Independent generators for channel init, fading, model init, acting and learning."""
    names = ("channel", "fading", "init", "act", "learn")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def model_specs(net: NetworkConfig, cfg: TrainConfig):
    """``(dqn_or_actor_spec, critic_spec_or_None)`` for the configured agent kind."""
    if cfg.agent == "dqn":
        return nn.dqn_spec(net.obs_width, net.T_hist, net.n_actions), None
    return (nn.actor_spec(net.obs_width, net.T_hist, net.n_actions),
            nn.critic_spec(net.obs_width, net.T_hist))


def _make_agent(net, cfg, rng, params=None):
    spec, critic_spec = model_specs(net, cfg)
    if cfg.agent == "dqn":
        return ag.DqnAgent.create(spec, rng, cfg.optimizer, cfg.alpha, cfg.buffer_capacity,
                                  cfg.batch_size, cfg.gamma, cfg.target_period, params)
    a = ag.AcAgent.create(spec, critic_spec, rng, cfg.optimizer, cfg.alpha_actor,
                          cfg.alpha_critic, cfg.gamma, cfg.ac_sample)
    if params is not None:
        a.actor, a.critic = (np.array(p, dtype=float) for p in params)
    return a


def _model_of(agent):
    if isinstance(agent, ag.DqnAgent):
        return agent.params.copy()
    return (agent.actor.copy(), agent.critic.copy())


def _load_model(agent, model):
    if isinstance(agent, ag.DqnAgent):
        agent.params = np.array(model, dtype=float)
        agent.optimizer.reset()
    else:
        agent.actor, agent.critic = (np.array(p, dtype=float) for p in model)
        agent.actor_opt.reset()
        agent.critic_opt.reset()


def _act(agent, states, eps, rng):
    if isinstance(agent, ag.DqnAgent):
        return ag.select_actions_dqn(agent, states, eps, rng)
    return ag.select_actions_ac(agent, states, eps, rng)


def _per_user_reward(reward, K):
    return np.broadcast_to(np.asarray(reward, dtype=float), (K,))


def _benchmark(state, net, counters, slot):
    counters.benchmark_solves += 1
    counters.benchmark_slots.append(slot)
    return exhaustive_benchmark(state, net).sum_rate


class _Loop:
    """Shared slot loop: histories, channel, logging and benchmark cadence."""

    def __init__(self, net, cfg, seed, T, state=None, benchmark=True, meta=None):
        self.net, self.cfg = net, cfg
        self.rng = seed_streams(seed)
        self.state = init_network(net, self.rng["channel"]) if state is None else state
        self.initial = self.state
        self.hist = np.zeros((net.K, net.T_hist, net.obs_width), dtype=np.uint8)
        self.T = T
        self.counters = Counters()
        self.log = MetricsLog(net.K, T, meta)
        self.bench = math.nan
        self.want_bench = benchmark
        self.levels = net.power_levels

    def play(self, t, actions, epsilon):
        """Run slot ``t``; returns ``(s, per-user reward, s_next)`` and advances the state."""
        net = self.net
        if self.want_bench and self.state.slot % net.T_v == 0 and (
                t == 0 or net.rho != 1.0):
            self.bench = _benchmark(self.state, net, self.counters, t)
        joint = action_to_joint(actions, net)
        res = step(self.state, joint, self.cfg.reward, self.rng["fading"], net)
        s = self.hist
        s_next = np.concatenate([s[:, 1:], res.observations[:, None]], axis=1)
        power = np.where(joint.transmit, self.levels[joint.power_level], 0.0)
        self.log.append(t, rates(res.sinrs), np.where(joint.transmit, joint.channel, -1), power,
                        epsilon, self.bench, net.eps_rate)
        self.hist, self.state = s_next, res.state
        return s, _per_user_reward(res.reward, net.K), s_next

    def result(self, models, agents, global_model=None):
        return RunResult(self.log, models, self.counters, self.initial, self.state,
                         global_model, agents)


def _meta(net, cfg, seed, kind):
    return {"kind": kind, "seed": seed, **{f"net.{k}": v for k, v in asdict(net).items()},
            **{f"train.{k}": getattr(v, "value", v) for k, v in asdict(cfg).items()}}


# ---------------------------------------------------------------- regimes

def run_cdrl(net: NetworkConfig, cfg: TrainConfig, seed=0, state=None) -> RunResult:
    """One shared model trained on the experience of all users.

    DQN: one network and one replay buffer receiving ``K`` transitions per
    slot, one minibatch update per slot.  Actor-critic: the critic steps on
    all ``K`` transitions, the actor on one randomly chosen user's.
    """
    cfg = cfg.with_(regime="cdrl")
    L = _Loop(net, cfg, seed, cfg.T_max, state, cfg.benchmark, _meta(net, cfg, seed, "train"))
    agent = _make_agent(net, cfg, L.rng["init"])
    sched = cfg.schedule
    K = net.K
    for t in range(cfg.T_max):
        eps = sched(t)
        actions = _act(agent, L.hist, eps, L.rng["act"])
        s, r, s_next = L.play(t, actions, eps)
        L.counters.transitions_uploaded += K
        if cfg.agent == "dqn":
            agent.buffer.extend(s, actions, r, s_next)
            before = agent.n_updates
            ag.dqn_update(agent, L.rng["learn"])
            if agent.n_updates == before:
                L.counters.skipped_updates += 1
            else:
                L.counters.updates += 1
        else:
            ag.ac_update(agent, nn.Batch(s, actions, r, s_next),
                         actor_rows=[L.rng["learn"].integers(K)])
            L.counters.updates += 1
    model = _model_of(agent)
    return L.result([model] * K, [agent], model)


def _local_update(agent, s, a, r, s_next, rng, counters):
    if isinstance(agent, ag.DqnAgent):
        agent.buffer.add(ag.Transition(s, a, r, s_next))
        before = agent.n_updates
        ag.dqn_update(agent, rng)
        if agent.n_updates == before:
            counters.skipped_updates += 1
            return
    else:
        ag.ac_update(agent, nn.Batch(s[None], np.array([a]), np.array([r]), s_next[None]))
    counters.updates += 1


def run_ddrl(net: NetworkConfig, cfg: TrainConfig, seed=0, state=None) -> RunResult:
    """Every user trains a private model on its private experience; nothing is shared."""
    cfg = cfg.with_(regime="ddrl")
    L = _Loop(net, cfg, seed, cfg.T_max, state, cfg.benchmark, _meta(net, cfg, seed, "train"))
    users = [_make_agent(net, cfg, L.rng["init"]) for _ in range(net.K)]
    sched = cfg.schedule
    for t in range(cfg.T_max):
        eps = sched(t)
        actions = np.array([_act(u, L.hist[k], eps, L.rng["act"])[0] for k, u in enumerate(users)])
        s, r, s_next = L.play(t, actions, eps)
        for k, u in enumerate(users):
            _local_update(u, s[k], actions[k], r[k], s_next[k], L.rng["learn"], L.counters)
    return L.result([_model_of(u) for u in users], users)


def _upload(model, bits, counters):
    """Simulated upload of one parameter vector; returns what the center receives."""
    counters.param_uploads += 1
    if not bits:
        counters.bytes_uploaded += 8 * model.size
        return model.copy()
    q, rec = nn.quantize_params(model, bits)
    blob = nn.pack_quantized(q, rec)
    counters.bytes_uploaded += len(blob)
    return nn.dequantize_params(*nn.unpack_quantized(blob))


def federated_average(models, bits, counters):
    """Upload (optionally quantized) models and average them at the center."""
    counters.fedavg_calls += 1
    if isinstance(models[0], tuple):
        return tuple(nn.fedavg([_upload(m[i], bits, counters) for m in models]) for i in range(2))
    return nn.fedavg([_upload(m, bits, counters) for m in models])


def _draw_group(rng, K, G):
    # members distinct within a group; groups drawn independently across rounds
    return np.sort(rng.choice(K, size=G, replace=False))


def run_fdrl(net: NetworkConfig, cfg: TrainConfig, seed=0, state=None) -> RunResult:
    """Federated training with partial participation.

    Users in the current group act, store experience and train locally.
    After every ``T_Fed`` slots the group uploads its models, the center
    averages them, draws a new group of ``G`` distinct users and sends it the
    global model.  Users outside the group act with their current (frozen)
    local model, or stay idle with ``idle_policy="silent"``.  With
    ``async_eps`` a user's epsilon clock only runs while it is in the group.
    """
    cfg = cfg.with_(regime="fdrl")
    K = net.K
    if cfg.G > K:
        raise InvalidParameterError(f"group size G={cfg.G} exceeds K={K}")
    L = _Loop(net, cfg, seed, cfg.T_max, state, cfg.benchmark, _meta(net, cfg, seed, "train"))
    init = _make_agent(net, cfg, L.rng["init"])
    global_model = _model_of(init)
    users = [_make_agent(net, cfg, L.rng["init"], global_model) for _ in range(K)]
    sched = cfg.schedule
    clock = np.zeros(K, dtype=np.int64)
    group = _draw_group(L.rng["learn"], K, cfg.G)
    in_group = np.zeros(K, dtype=bool)
    in_group[group] = True
    for t in range(cfg.T_max):
        eps_k = np.array([sched(clock[k] if cfg.async_eps else t) for k in range(K)])
        actions = np.zeros(K, dtype=np.int64)
        for k, u in enumerate(users):
            if in_group[k] or cfg.idle_policy == "frozen":
                actions[k] = _act(u, L.hist[k], eps_k[k], L.rng["act"])[0]
        s, r, s_next = L.play(t, actions, float(eps_k.mean()))
        for k in group:
            _local_update(users[k], s[k], actions[k], r[k], s_next[k], L.rng["learn"],
                          L.counters)
            clock[k] += 1
        if (t + 1) % cfg.T_Fed == 0:
            global_model = federated_average([_model_of(users[k]) for k in group],
                                             cfg.quant_bits, L.counters)
            L.counters.sync_rounds += 1
            L.counters.sync_slots.append(t + 1)
            group = _draw_group(L.rng["learn"], K, cfg.G)
            in_group[:] = False
            in_group[group] = True
            for k in group:
                _load_model(users[k], global_model)
    return L.result([_model_of(u) for u in users], users, global_model)


RUNNERS = {"cdrl": run_cdrl, "ddrl": run_ddrl, "fdrl": run_fdrl}


def run_training(net: NetworkConfig, cfg: TrainConfig, seed=0, state=None) -> RunResult:
    return RUNNERS[cfg.regime](net, cfg, seed, state)


# ---------------------------------------------------------------- testing

def run_test(models, net: NetworkConfig, cfg: TrainConfig, T_test: int, seed=0, state=None,
             epsilon=None, benchmark=True) -> RunResult:
    """Frozen-policy evaluation on the (possibly fading) channel.

    ``models`` holds one model per user (or a single model shared by all).
    No parameter is updated.  The benchmark is recomputed at slot 0 and after
    every channel variation, i.e. once per ``T_v`` slots.
    """
    if T_test < 1:
        raise InvalidParameterError("T_test must be >= 1")
    K = net.K
    if not isinstance(models, list):
        models = [models] * K
    if len(models) != K:
        raise InvalidParameterError(f"expected {K} models, got {len(models)}")
    eps = cfg.test_epsilon if epsilon is None else epsilon
    L = _Loop(net, cfg, seed, T_test, state, False, _meta(net, cfg, seed, "test"))
    users = [_make_agent(net, cfg, np.random.default_rng(0), m) for m in models]
    for t in range(T_test):
        if benchmark and L.state.slot % net.T_v == 0:
            L.bench = _benchmark(L.state, net, L.counters, t)
        actions = np.array([_act(u, L.hist[k], eps, L.rng["act"])[0] for k, u in enumerate(users)])
        L.play(t, actions, eps)
    return L.result(models, users)


def run_dynamic_training(net: NetworkConfig, cfg: TrainConfig, Tv_list, rho=None, seed=0):
    """Train once per ``T_v`` with per-variation correlation ``rho**T_v``.

    Every setting sees the same total variation intensity as varying each
    slot with correlation ``rho`` (defaults to ``net.rho``).
    """
    rho = net.rho if rho is None else rho
    if not 0.0 <= rho <= 1.0:
        raise InvalidParameterError("rho must lie in [0, 1]")
    out = {}
    for Tv in Tv_list:
        if Tv < 1:
            raise InvalidParameterError("T_v must be >= 1")
        out[Tv] = run_training(net.with_(T_v=int(Tv), rho=rho**Tv), cfg, seed)
    return out


# ---------------------------------------------------------------- accounting

@dataclass(frozen=True)
class ExchangeRecord:
    window: int
    cdrl_bits: int
    fdrl_bits: int
    ratio: float
    mode: str


def info_exchange_account(net: NetworkConfig, G: int = 2, T_Fed: int = 100, bits: int = 11,
                          n_params: int | None = None, window: int = 100,
                          mode: str = "table") -> ExchangeRecord:
    """Digital upload bits per ``window`` slots, centralized vs. federated.

    Centralized: every user uploads ``(s, a, s')`` each slot, with ``a`` on 4
    bits.  In ``"table"`` mode a state is charged ``K * obs_width`` bits; in
    ``"history"`` mode it is charged its actual ``T_hist * obs_width`` bits.
    Federated: ``G`` users upload ``n_params`` values of ``bits`` bits once per
    ``T_Fed`` slots.  Real-valued side information (rewards, quantizer scale)
    is not counted.
    """
    if not 1 <= G <= net.K:
        raise InvalidParameterError(f"G must lie in [1, K={net.K}]")
    if T_Fed < 1 or window < 1:
        raise InvalidParameterError("T_Fed and window must be >= 1")
    if not 1 <= bits <= 64:
        raise InvalidParameterError("bits must lie in [1, 64]")
    if mode not in ("table", "history"):
        raise InvalidParameterError("mode must be 'table' or 'history'")
    if n_params is None:
        n_params = nn.param_count(nn.dqn_spec(net.obs_width, net.T_hist, net.n_actions))
    rows = net.K if mode == "table" else net.T_hist
    per_user_slot = 2 * rows * net.obs_width + 4
    cdrl = window * net.K * per_user_slot
    fdrl = (window // T_Fed) * G * n_params * bits
    return ExchangeRecord(window, cdrl, fdrl, fdrl / cdrl, mode)
