import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedspectrum import agents as ag
from fedspectrum import neural as nn
from fedspectrum.errors import InvalidParameterError, NumericalError


def within_3_sigma(counts, probs):
    n = counts.sum()
    sigma = np.sqrt(n * probs * (1 - probs))
    return np.all(np.abs(counts - n * probs) <= 3 * sigma)


def one_hot_state(i, width, T=1):
    s = np.zeros((T, width), dtype=np.uint8)
    s[-1, i] = 1
    return s


def linear_agent(Q_rows, alpha=0.5, batch_size=1, capacity=100):
    """DQN with one Q-value per (state, action): Q(s_i, a) = W[i, a]."""
    W = np.asarray(Q_rows, dtype=float)
    spec = nn.NetworkSpec(W.shape[0], 1, "linear", n_actions=W.shape[1])
    return ag.DqnAgent.create(spec, None, "sgd", alpha, capacity, batch_size, 0.9,
                              params=W.ravel())


class TestEpsilon:
    sched = ag.EpsilonSchedule(0.2, 0.01, 320000)

    def test_examples(self):
        assert ag.epsilon_at(self.sched, 0) == 0.2
        assert ag.epsilon_at(self.sched, 160000) == pytest.approx(0.105, abs=1e-15)
        assert ag.epsilon_at(self.sched, 320000) == pytest.approx(0.01, abs=1e-15)
        assert ag.epsilon_at(self.sched, 10**7) == pytest.approx(0.01, abs=1e-15)

    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_nonincreasing(self, a, b):
        lo, hi = sorted((a, b))
        assert self.sched(hi) <= self.sched(lo)

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            ag.EpsilonSchedule(0.1, 0.2, 10)
        with pytest.raises(InvalidParameterError):
            ag.EpsilonSchedule(0.2, 0.1, 0)
        with pytest.raises(InvalidParameterError):
            ag.epsilon_at(self.sched, -1)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ag.ReplayBuffer(3)
        for i in range(5):
            buf.add(ag.Transition(np.full((2, 3), i, np.uint8), i, float(i), np.zeros((2, 3))))
        assert len(buf) == 3 and buf.n_added == 5
        assert buf.get(buf.slots()).a.tolist() == [2, 3, 4]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.lists(st.integers(1, 7), max_size=10), st.integers(0, 10**6))
    def test_capacity_and_distinct_samples(self, cap, chunks, seed):
        buf = ag.ReplayBuffer(cap)
        n = 0
        for c in chunks:
            a = np.arange(n, n + c)
            buf.extend(np.zeros((c, 1, 2)), a, np.zeros(c), np.zeros((c, 1, 2)))
            n += c
            assert len(buf) == min(n, cap)
            # contents are the newest min(n, cap) transitions in insertion order
            assert buf.get(buf.slots()).a.tolist() == list(range(max(0, n - cap), n))
        if len(buf):
            idx = buf.sample_indices(len(buf), np.random.default_rng(seed))
            assert len(set(idx.tolist())) == len(buf)

    def test_sampling_uniform(self):
        buf = ag.ReplayBuffer(10)
        buf.extend(np.zeros((10, 1, 1)), np.arange(10), np.zeros(10), np.zeros((10, 1, 1)))
        rng = np.random.default_rng(0)
        counts = np.bincount(np.concatenate([buf.sample(3, rng).a for _ in range(20000)]),
                             minlength=10)
        assert within_3_sigma(counts, np.full(10, 0.1))

    def test_errors(self):
        buf = ag.ReplayBuffer(4)
        with pytest.raises(InvalidParameterError):
            buf.sample(1, np.random.default_rng(0))
        with pytest.raises(InvalidParameterError):
            buf.extend(np.zeros((1, 1, 1)), [0], [np.nan], np.zeros((1, 1, 1)))
        with pytest.raises(InvalidParameterError):
            ag.ReplayBuffer(0)


class TestDqnSelection:
    def test_greedy(self):
        agent = linear_agent([[1.0, 3.0, 2.0]])
        assert ag.select_action_dqn(agent, one_hot_state(0, 1), 0.0, np.random.default_rng(0)) == 1

    def test_tie_break_lowest(self):
        agent = linear_agent([[2.0, 2.0, 2.0]])
        rng = np.random.default_rng(0)
        assert all(ag.select_action_dqn(agent, one_hot_state(0, 1), 0.0, rng) == 0
                   for _ in range(20))

    @pytest.mark.parametrize("eps", [1.0, 0.3])
    def test_mixture_law(self, eps):
        agent = linear_agent([[1.0, 3.0, 2.0, 0.0]])
        states = np.repeat(one_hot_state(0, 1)[None], 10**5, axis=0)
        acts = ag.select_actions_dqn(agent, states, eps, np.random.default_rng(1))
        probs = np.full(4, eps / 4)
        probs[1] += 1 - eps
        assert within_3_sigma(np.bincount(acts, minlength=4), probs)


class TestDqnUpdate:
    def test_tabular_sanity(self):
        agent = linear_agent([[0.0, 0.0], [0.0, 0.0]])
        agent.buffer.add(ag.Transition(one_hot_state(0, 2), 1, 1.0, one_hot_state(1, 2)))
        ag.dqn_update(agent, np.random.default_rng(0))
        np.testing.assert_array_equal(agent.params.reshape(2, 2), [[0.0, 0.5], [0.0, 0.0]])

    def test_zero_loss_no_change(self):
        # Q(s0, 0) = 1 + 0.9 * max Q(s1) with max Q(s1) = 10
        agent = linear_agent([[10.0, 0.0], [10.0, 4.0]], batch_size=2)
        for _ in range(2):
            agent.buffer.add(ag.Transition(one_hot_state(0, 2), 0, 1.0, one_hot_state(1, 2)))
        agent.params = np.array([1.0 + 0.9 * 10.0, 0.0, 10.0, 4.0])
        before = agent.params.copy()
        ag.dqn_update(agent, np.random.default_rng(0))
        np.testing.assert_array_equal(agent.params, before)

    def test_skip_when_buffer_small(self, caplog):
        agent = linear_agent([[0.0, 0.0]], batch_size=3)
        agent.buffer.add(ag.Transition(one_hot_state(0, 1), 0, 1.0, one_hot_state(0, 1)))
        before = agent.params.copy()
        with caplog.at_level(logging.DEBUG, logger="fedspectrum.agents"):
            ag.dqn_update(agent, np.random.default_rng(0))
        assert agent.n_skipped == 1 and agent.n_updates == 0
        assert "skipped" in caplog.text
        np.testing.assert_array_equal(agent.params, before)

    @pytest.mark.parametrize("seed", range(5))
    def test_descent_on_fixed_minibatch(self, seed):
        rng = np.random.default_rng(seed)
        spec = nn.dqn_spec(5, 3, 3, lstm_hidden=4, adv_width=3, val_width=3)
        agent = ag.DqnAgent.create(spec, rng, "sgd", 1e-3, batch_size=4)
        batch = nn.Batch(rng.integers(0, 2, (4, 3, 5)), rng.integers(0, 3, 4),
                         rng.normal(size=4) * 5, rng.integers(0, 2, (4, 3, 5)))
        frozen = agent.params.copy()  # loss measured against a fixed bootstrap target
        losses = [nn.dqn_td_loss_grad(spec, agent.params, batch, 0.9, frozen)[0]]
        for _ in range(2):
            agent.target_params = frozen
            ag.dqn_update(agent, rng, batch=batch)
            losses.append(nn.dqn_td_loss_grad(spec, agent.params, batch, 0.9, frozen)[0])
        assert losses[0] > losses[1] > losses[2]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_guard(self):
        agent = linear_agent([[0.0, 0.0]])
        agent.params[0] = np.inf
        agent.buffer.add(ag.Transition(one_hot_state(0, 1), 0, 1.0, one_hot_state(0, 1)))
        with pytest.raises(NumericalError):
            ag.dqn_update(agent, np.random.default_rng(0))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            spec = nn.dqn_spec(4, 2, 3, lstm_hidden=3, adv_width=2, val_width=2)
            agent = ag.DqnAgent.create(spec, rng, "adam", 1e-2, batch_size=2)
            stream = np.random.default_rng(4)
            for _ in range(30):
                agent.buffer.add(ag.Transition(stream.integers(0, 2, (2, 4)), stream.integers(3),
                                               stream.normal(), stream.integers(0, 2, (2, 4))))
                ag.dqn_update(agent, rng)
            return agent.params
        np.testing.assert_array_equal(run(), run())


def fixed_actor(logits):
    logits = np.asarray(logits, dtype=float)
    spec = nn.NetworkSpec(2, 1, "actor", n_actions=len(logits), lstm_hidden=1, actor_width=0)
    w = np.zeros(nn.param_count(spec))
    nn.unpack(spec, w)["out.b"][...] = logits
    critic = nn.critic_spec(2, 1, lstm_hidden=1, critic_width=1)
    return ag.AcAgent(spec, w, critic, np.zeros(nn.param_count(critic)),
                      ag.Optimizer("sgd", 0.1), ag.Optimizer("sgd", 0.1))


class TestAcSelection:
    def test_degenerate_scores(self):
        agent = fixed_actor([1000.0, 0.0, 0.0])
        rng = np.random.default_rng(0)
        states = np.zeros((10**4, 1, 2))
        assert np.all(ag.select_actions_ac(agent, states, 0.0, rng) == 0)

    @pytest.mark.parametrize("logits,eps", [([0.0, 0.0, 0.0, 0.0], 0.0), ([5.0, -3.0, 1.0, 0.0], 1.0)])
    def test_uniform(self, logits, eps):
        agent = fixed_actor(logits)
        acts = ag.select_actions_ac(agent, np.zeros((10**5, 1, 2)), eps, np.random.default_rng(2))
        assert within_3_sigma(np.bincount(acts, minlength=4), np.full(4, 0.25))

    def test_sampling_follows_scores(self):
        agent = fixed_actor([math.log(0.5), math.log(0.3), math.log(0.2)])
        acts = ag.select_actions_ac(agent, np.zeros((10**5, 1, 2)), 0.0, np.random.default_rng(5))
        assert within_3_sigma(np.bincount(acts, minlength=3), np.array([0.5, 0.3, 0.2]))

    def test_argmax_switch(self):
        agent = fixed_actor([0.0, 0.1, 0.0])
        agent.sample = False
        acts = ag.select_actions_ac(agent, np.zeros((100, 1, 2)), 0.0, np.random.default_rng(0))
        assert np.all(acts == 1)


def two_valued_critic():
    """Critic on 1-bit windows with V = 1 when the last bit is 0 and V = 2 when it is 1."""
    spec = nn.critic_spec(1, 1, lstm_hidden=1, critic_width=1)
    w = np.zeros(nn.param_count(spec))
    p = nn.unpack(spec, w)
    # gates (i, f, o, g): input and output open, forget closed, candidate = tanh(x)
    p["lstm.b"][...] = [50.0, -50.0, 50.0, 0.0]
    p["lstm.W"][0, 3] = 1.0
    p["hid.W"][0, 0] = 1.0
    p["out.b"][0] = 1.0
    hh = math.tanh(math.tanh(math.tanh(1.0)))
    p["out.W"][0, 0] = 1.0 / hh
    return spec, w


class TestAcUpdate:
    def make(self, rng, opt="sgd"):
        actor = nn.actor_spec(3, 2, 4, lstm_hidden=3, actor_width=2)
        critic = nn.critic_spec(3, 2, lstm_hidden=3, critic_width=2)
        return ag.AcAgent.create(actor, critic, rng, opt, 0.01, 0.02)

    def test_delta_example(self):
        spec, w = two_valued_critic()
        s, s_next = np.zeros((1, 1, 1)), np.ones((1, 1, 1))
        assert nn.forward(spec, w, s)[0] == 1.0
        assert nn.forward(spec, w, s_next)[0] == pytest.approx(2.0, abs=1e-15)
        agent = fixed_actor([0.0, 0.0])
        agent.critic_spec, agent.critic = spec, w
        agent.actor_spec = nn.NetworkSpec(1, 1, "actor", n_actions=2, lstm_hidden=1, actor_width=0)
        agent.actor = np.zeros(nn.param_count(agent.actor_spec))
        delta = ag.ac_update(agent, nn.Batch(s, np.array([0]), np.array([1.0]), s_next))
        assert delta[0] == pytest.approx(1.8, abs=1e-12)

    def test_zero_delta_no_change(self):
        rng = np.random.default_rng(0)
        agent = self.make(rng)
        p = nn.unpack(agent.critic_spec, agent.critic)
        p["out.W"][...] = 0.0
        p["out.b"][...] = 10.0  # V = 10 everywhere
        before = agent.actor.copy(), agent.critic.copy()
        batch = nn.Batch(rng.integers(0, 2, (3, 2, 3)), np.array([0, 1, 2]), np.full(3, 1.0),
                         rng.integers(0, 2, (3, 2, 3)))
        delta = ag.ac_update(agent, batch)
        np.testing.assert_array_equal(delta, 0.0)
        np.testing.assert_array_equal(agent.actor, before[0])
        np.testing.assert_array_equal(agent.critic, before[1])

    @pytest.mark.parametrize("seed", range(3))
    def test_actor_step_along_score_gradient(self, seed):
        rng = np.random.default_rng(seed)
        agent = self.make(rng)
        s, s_next = rng.integers(0, 2, (1, 2, 3)), rng.integers(0, 2, (1, 2, 3))
        a, r = 2, 0.7
        theta = agent.actor.copy()
        delta = ag.ac_update(agent, nn.Batch(s, np.array([a]), np.array([r]), s_next))[0]

        def log_pi(th):
            return math.log(nn.forward(agent.actor_spec, th, s)[0, a])

        h = 1e-6
        fd = np.array([(log_pi(theta + h * e) - log_pi(theta - h * e)) / (2 * h)
                       for e in np.eye(theta.size)])
        step = (agent.actor - theta) / agent.actor_opt.alpha
        expected = delta * fd
        assert np.max(np.abs(step - expected)) <= 1e-4 * np.max(np.abs(expected))

    def test_critic_moves_toward_target(self):
        rng = np.random.default_rng(4)
        agent = self.make(rng)
        batch = nn.Batch(rng.integers(0, 2, (1, 2, 3)), np.array([1]), np.array([5.0]),
                         rng.integers(0, 2, (1, 2, 3)))
        d0 = abs(ag.ac_update(agent, batch)[0])
        d1 = abs(nn.td_errors(agent.critic_spec, agent.critic, batch, 0.9)[0])
        assert d1 < d0

    def test_actor_rows_subset(self):
        rng = np.random.default_rng(6)
        a1, a2 = self.make(rng), None
        a2 = ag.AcAgent(a1.actor_spec, a1.actor.copy(), a1.critic_spec, a1.critic.copy(),
                        ag.Optimizer("sgd", 0.01), ag.Optimizer("sgd", 0.02))
        batch = nn.Batch(rng.integers(0, 2, (3, 2, 3)), np.array([0, 1, 2]), rng.normal(size=3),
                         rng.integers(0, 2, (3, 2, 3)))
        delta = ag.ac_update(a1, batch, actor_rows=[1])
        _, g = nn.actor_loss_grad(a2.actor_spec, a2.actor, nn.Batch(*(x[1:2] for x in batch)),
                                  delta[1:2])
        np.testing.assert_allclose(a1.actor, a2.actor - 0.01 * g, rtol=1e-13, atol=1e-16)

    def test_nonfinite_guard(self):
        agent = self.make(np.random.default_rng(0))
        agent.critic[:] = np.nan
        batch = nn.Batch(np.zeros((1, 2, 3)), np.array([0]), np.array([1.0]), np.zeros((1, 2, 3)))
        with pytest.raises(NumericalError):
            ag.ac_update(agent, batch)


def test_optimizer_validation():
    with pytest.raises(InvalidParameterError):
        ag.Optimizer("rmsprop", 0.1)
    with pytest.raises(InvalidParameterError):
        ag.Optimizer("sgd", 0.0)
