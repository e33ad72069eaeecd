"""DQN and actor-critic agents: exploration, replay memory and update rules.

Agents hold flat parameter vectors from :mod:`fedspectrum.neural`.  The
update functions mutate the agent in place and return it.  Greedy ties go to
the lowest action index (``np.argmax`` semantics).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import neural as nn
from .errors import InvalidParameterError, NumericalError

log = logging.getLogger(__name__)


class Transition(NamedTuple):
    s: np.ndarray  # (T_hist, obs_width)
    a: int
    r: float
    s_next: np.ndarray


class ReplayBuffer:
    """Bounded FIFO of transitions stored as packed arrays.

    Storage is allocated on the first insert, when the state shape is known.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidParameterError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._s = self._s_next = self._a = self._r = None
        self._head = 0  # next write position
        self._size = 0
        self.n_added = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, state_shape, dtype):
        self._s = np.zeros((self.capacity, *state_shape), dtype=dtype)
        self._s_next = np.zeros_like(self._s)
        self._a = np.zeros(self.capacity, dtype=np.int64)
        self._r = np.zeros(self.capacity, dtype=np.float64)

    def add(self, t: Transition):
        self.extend(np.asarray(t.s)[None], [t.a], [t.r], np.asarray(t.s_next)[None])

    def extend(self, s, a, r, s_next):
        """Append a batch of transitions in row order."""
        s, s_next = np.asarray(s), np.asarray(s_next)
        a = np.asarray(a, dtype=np.int64)
        r = np.asarray(r, dtype=np.float64)
        if not np.all(np.isfinite(r)):
            raise InvalidParameterError("rewards must be finite")
        if self._s is None:
            dtype = np.uint8 if s.dtype.kind in "ub" else np.float64
            self._allocate(s.shape[1:], dtype)
        for i in range(len(a)):
            j = self._head
            self._s[j], self._a[j], self._r[j], self._s_next[j] = s[i], a[i], r[i], s_next[i]
            self._head = (j + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        self.n_added += len(a)

    def slots(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        start = (self._head - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def get(self, idx) -> nn.Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return nn.Batch(self._s[idx], self._a[idx], self._r[idx], self._s_next[idx])

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` distinct storage slots drawn uniformly."""
        if n > self._size:
            raise InvalidParameterError(f"cannot sample {n} from {self._size} transitions")
        return rng.choice(self._size, size=n, replace=False)

    def sample(self, n: int, rng: np.random.Generator) -> nn.Batch:
        return self.get(self.sample_indices(n, rng))


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_max: float = 0.2
    eps_min: float = 0.01
    T_e: int = 320000
    test_epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.eps_min <= self.eps_max <= 1.0:
            raise InvalidParameterError("need 0 <= eps_min <= eps_max <= 1")
        if self.T_e < 1:
            raise InvalidParameterError("T_e must be >= 1")
        if not 0.0 <= self.test_epsilon <= 1.0:
            raise InvalidParameterError("test_epsilon must lie in [0, 1]")

    def __call__(self, t) -> float:
        return epsilon_at(self, t)


def epsilon_at(schedule: EpsilonSchedule, t) -> float:
    """Linear decay from ``eps_max`` to ``eps_min`` over ``[0, T_e]``, then held."""
    if t < 0:
        raise InvalidParameterError("t must be >= 0")
    frac = min(t / schedule.T_e, 1.0)
    return schedule.eps_max + frac * (schedule.eps_min - schedule.eps_max)


# ---------------------------------------------------------------- optimizers

@dataclass
class Optimizer:
    """Adam or plain SGD over one flat parameter vector."""
    kind: str
    alpha: float
    adam: nn.AdamState | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InvalidParameterError(f"unknown optimizer {self.kind!r}")
        if not self.alpha > 0:
            raise InvalidParameterError("learning rate must be > 0")

    def step(self, params, grad):
        if self.kind == "sgd":
            return nn.sgd_step(params, grad, self.alpha)
        if self.adam is None:
            self.adam = nn.AdamState.zeros(params.size)
        self.adam, new = nn.adam_step(self.adam, params, grad, self.alpha)
        return new

    def reset(self):
        self.adam = None


def _check_finite(params, what):
    if not np.all(np.isfinite(params)):
        raise NumericalError(f"non-finite {what} parameters after update")


# ---------------------------------------------------------------- DQN

@dataclass
class DqnAgent:
    spec: nn.NetworkSpec
    params: np.ndarray
    optimizer: Optimizer
    buffer: ReplayBuffer
    batch_size: int = 12
    gamma: float = 0.9
    target_period: int = 0  # 0: bootstrap from the online network
    target_params: np.ndarray | None = None
    n_updates: int = 0
    n_skipped: int = 0

    @classmethod
    def create(cls, spec, rng, optimizer="adam", alpha=1e-3, capacity=600000, batch_size=12,
               gamma=0.9, target_period=0, params=None) -> "DqnAgent":
        w = nn.init_params(spec, rng) if params is None else np.array(params, dtype=float)
        return cls(spec, w, Optimizer(optimizer, alpha), ReplayBuffer(capacity), batch_size,
                   gamma, target_period, w.copy() if target_period else None)

    def q_values(self, states) -> np.ndarray:
        return nn.forward(self.spec, self.params, states)


def _epsilon_greedy(greedy, n_actions, epsilon, rng):
    # one uniform and one random action per row, drawn whether used or not, keeps the stream fixed
    u = rng.random(len(greedy))
    rand = rng.integers(0, n_actions, len(greedy))
    return np.where(u < epsilon, rand, greedy)


def select_actions_dqn(agent: DqnAgent, states, epsilon: float, rng) -> np.ndarray:
    """Epsilon-greedy actions for a batch of state windows ``(B, T, D)``."""
    q = agent.q_values(states)
    return _epsilon_greedy(np.argmax(q, axis=1), agent.spec.n_outputs, epsilon, rng)


def select_action_dqn(agent: DqnAgent, state, epsilon: float, rng) -> int:
    return int(select_actions_dqn(agent, np.asarray(state)[None], epsilon, rng)[0])


def dqn_update(agent: DqnAgent, rng, batch: nn.Batch | None = None) -> DqnAgent:
    """One minibatch TD step.  Skips (and logs) while the buffer is smaller than a minibatch."""
    if batch is None:
        if len(agent.buffer) < agent.batch_size:
            agent.n_skipped += 1
            log.debug("dqn_update skipped: %d transitions < minibatch %d",
                      len(agent.buffer), agent.batch_size)
            return agent
        batch = agent.buffer.sample(agent.batch_size, rng)
    _, grad = nn.dqn_td_loss_grad(agent.spec, agent.params, batch, agent.gamma,
                                  agent.target_params)
    agent.params = agent.optimizer.step(agent.params, grad)
    _check_finite(agent.params, "DQN")
    agent.n_updates += 1
    if agent.target_period and agent.n_updates % agent.target_period == 0:
        agent.target_params = agent.params.copy()
    return agent


# ---------------------------------------------------------------- actor-critic

@dataclass
class AcAgent:
    actor_spec: nn.NetworkSpec
    actor: np.ndarray
    critic_spec: nn.NetworkSpec
    critic: np.ndarray
    actor_opt: Optimizer
    critic_opt: Optimizer
    gamma: float = 0.9
    sample: bool = True  # exploit branch samples the softmax; False takes its argmax
    n_updates: int = field(default=0)

    @classmethod
    def create(cls, actor_spec, critic_spec, rng, optimizer="adam", alpha_actor=5e-4,
               alpha_critic=1e-3, gamma=0.9, sample=True) -> "AcAgent":
        return cls(actor_spec, nn.init_params(actor_spec, rng), critic_spec,
                   nn.init_params(critic_spec, rng), Optimizer(optimizer, alpha_actor),
                   Optimizer(optimizer, alpha_critic), gamma, sample)


def select_actions_ac(agent: AcAgent, states, epsilon: float, rng) -> np.ndarray:
    probs = nn.forward(agent.actor_spec, agent.actor, states)
    n = probs.shape[1]
    if agent.sample:
        # inverse-CDF sampling, one uniform per row
        u = rng.random(len(probs))
        cdf = np.cumsum(probs, axis=1)
        policy = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), n - 1)
    else:
        policy = np.argmax(probs, axis=1)
    return _epsilon_greedy(policy, n, epsilon, rng)


def select_action_ac(agent: AcAgent, state, epsilon: float, rng) -> int:
    return int(select_actions_ac(agent, np.asarray(state)[None], epsilon, rng)[0])


def ac_update(agent: AcAgent, batch: nn.Batch, actor_rows=None) -> np.ndarray:
    """Critic step on ``0.5 delta^2`` over ``batch``, actor step on ``-log pi * delta``.

    ``delta = r + gamma V(s') - V(s)`` is computed once with the pre-update
    critic.  ``actor_rows`` limits the actor step to a subset of the batch
    rows (default: all).  Returns ``delta``.
    """
    _, g_critic, delta = nn.critic_loss_grad(agent.critic_spec, agent.critic, batch, agent.gamma)
    if actor_rows is None:
        actor_batch, actor_delta = batch, delta
    else:
        rows = np.atleast_1d(np.asarray(actor_rows, dtype=np.int64))
        actor_batch = nn.Batch(*(np.asarray(x)[rows] for x in batch))
        actor_delta = delta[rows]
    _, g_actor = nn.actor_loss_grad(agent.actor_spec, agent.actor, actor_batch, actor_delta)
    agent.critic = agent.critic_opt.step(agent.critic, g_critic)
    agent.actor = agent.actor_opt.step(agent.actor, g_actor)
    _check_finite(agent.critic, "critic")
    _check_finite(agent.actor, "actor")
    agent.n_updates += 1
    return delta
