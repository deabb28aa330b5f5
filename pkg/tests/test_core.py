import numpy as np
import pytest

from sqrl.core import (ReplayBuffer, RngStream, TabularTask, Transition,
                       TERMINAL_FAILURE, TERMINAL_GOAL, TERMINAL_TIMEOUT, rollout)


def make_chain_task(n=5, goal=None, first_step_fail=False):
    """Deterministic 1-d chain: action 0 stays, action 1 moves right."""
    goal = n - 1 if goal is None else goal
    P = np.zeros((n, 2, n))
    unsafe = np.zeros(n, dtype=bool)
    for s in range(n):
        P[s, 0, s] = 1.0
        P[s, 1, min(s + 1, n - 1)] = 1.0
    if first_step_fail:
        unsafe[1] = True
        P[1] = 0.0
        P[1, :, 1] = 1.0
    goal_mask = np.zeros(n, dtype=bool)
    if not first_step_fail:
        goal_mask[goal] = True
        P[goal] = 0.0
        P[goal, :, goal] = 1.0
    mu = np.zeros(n)
    mu[0] = 1.0
    r = np.zeros((n, 2))
    task = TabularTask(P, r, mu, unsafe=unsafe, goal=goal_mask, horizon=10)
    task.validate()
    return task


class AlwaysRight:
    def act(self, state, rng):
        return 1


class TestRngStream:
    def test_bit_exact_reproducibility(self):
        a = RngStream(123)
        b = RngStream(123)
        assert np.array_equal(a.standard_normal(50), b.standard_normal(50))
        assert np.array_equal(a.uniform(size=10), b.uniform(size=10))

    def test_split_children_independent_of_parent_consumption(self):
        a = RngStream(7)
        kids_before = a.split(2)
        a.standard_normal(100)  # consuming the parent generator
        b = RngStream(7)
        kids_after = b.split(2)
        for ka, kb in zip(kids_before, kids_after):
            assert np.array_equal(ka.standard_normal(5), kb.standard_normal(5))

    def test_split_children_differ(self):
        kids = RngStream(7).split(2)
        assert not np.array_equal(kids[0].standard_normal(5), kids[1].standard_normal(5))

    def test_choice_index_distribution(self):
        rng = RngStream(0)
        probs = np.array([0.2, 0.8])
        draws = [rng.choice_index(probs) for _ in range(5000)]
        assert abs(np.mean(draws) - 0.8) < 0.03


class TestReplayBuffer:
    def tr(self, i):
        return Transition(i, 0, 0.0, i + 1)

    def test_push_and_size(self):
        buf = ReplayBuffer(1)
        buf.push(self.tr(0))
        assert len(buf) == 1

    def test_fifo_eviction(self):
        buf = ReplayBuffer(2)
        for i in range(3):
            buf.push(self.tr(i))
        assert len(buf) == 2
        states = {t.state for t in buf._items}
        assert 0 not in states and {1, 2} == states

    def test_push_then_sample_returns_it(self):
        buf = ReplayBuffer(4)
        t = self.tr(9)
        buf.push(t)
        assert buf.sample(1, RngStream(0))[0] is t

    def test_sample_with_replacement_from_copies(self):
        buf = ReplayBuffer(10)
        t = self.tr(3)
        for _ in range(4):
            buf.push(t)
        batch = buf.sample(4, RngStream(1))
        assert all(b is t for b in batch)

    def test_underfull_errors(self):
        buf = ReplayBuffer(5)
        with pytest.raises(ValueError):
            buf.sample(1, RngStream(0))
        buf.push(self.tr(0))
        with pytest.raises(ValueError):
            buf.sample(2, RngStream(0))

    def test_uniform_frequencies(self):
        buf = ReplayBuffer(10)
        a, b = self.tr(0), self.tr(1)
        buf.push(a)
        buf.push(b)
        rng = RngStream(42)
        n = 10_000
        count_a = 0
        for _ in range(n // 2):
            count_a += sum(1 for t in buf.sample(2, rng) if t is a)
        freq = count_a / n
        assert abs(freq - 0.5) < 0.05
        # one-degree-of-freedom chi-square against uniform, alpha = 0.01
        chi2 = (count_a - n / 2) ** 2 / (n / 2) + ((n - count_a) - n / 2) ** 2 / (n / 2)
        assert chi2 < 6.635

    def test_never_exceeds_capacity_random_ops(self):
        rng = RngStream(5)
        buf = ReplayBuffer(7)
        for i in range(500):
            if rng.uniform() < 0.7 or len(buf) == 0:
                buf.push(self.tr(i))
            else:
                buf.sample(min(len(buf), 3), rng)
            assert len(buf) <= 7


class TestRollout:
    def test_reaches_goal_in_three_steps(self):
        task = make_chain_task(n=4)
        traj = rollout(AlwaysRight(), task, RngStream(0))
        assert len(traj) == 3
        assert traj.terminal_cause == TERMINAL_GOAL
        assert traj.transitions[-1].reached_goal

    def test_immediate_failure(self):
        task = make_chain_task(first_step_fail=True)
        traj = rollout(AlwaysRight(), task, RngStream(0))
        assert len(traj) == 1
        assert traj.terminal_cause == TERMINAL_FAILURE
        assert traj.transitions[0].failed

    def test_timeout_at_horizon(self):
        task = make_chain_task(n=50)
        traj = rollout(AlwaysRight(), task, RngStream(0))
        assert len(traj) == task.horizon
        assert traj.terminal_cause == TERMINAL_TIMEOUT
        assert traj.transitions[-1].timed_out

    def test_failure_only_at_final_transition(self):
        task = make_chain_task(first_step_fail=True)
        traj = rollout(AlwaysRight(), task, RngStream(3))
        for t in traj.transitions[:-1]:
            assert not t.failed

    def test_no_transition_sourced_at_failure_state(self):
        task = make_chain_task(first_step_fail=True)
        for seed in range(20):
            traj = rollout(AlwaysRight(), task, RngStream(seed))
            for t in traj.transitions:
                assert not task.is_failure(t.state)

    def test_invalid_action_reported_with_step(self):
        class Bad:
            def act(self, state, rng):
                return 7

        task = make_chain_task()
        with pytest.raises(ValueError, match="step 0"):
            rollout(Bad(), task, RngStream(0))

    def test_deterministic_given_seed(self):
        P = np.zeros((3, 2, 3))
        P[0, 0] = [0.5, 0.5, 0.0]
        P[0, 1] = [0.0, 0.5, 0.5]
        P[1, :] = [0.3, 0.4, 0.3]
        P[2, :, 2] = 1.0
        goal = np.array([False, False, True])
        task = TabularTask(P, np.zeros((3, 2)), np.array([1.0, 0, 0]),
                           unsafe=np.zeros(3, dtype=bool), goal=goal, horizon=12)

        class RandomPolicy:
            def act(self, state, rng):
                return int(rng.integers(0, 2))

        t1 = rollout(RandomPolicy(), task, RngStream(11))
        t2 = rollout(RandomPolicy(), task, RngStream(11))
        assert len(t1) == len(t2)
        assert t1.terminal_cause == t2.terminal_cause
        for a, b in zip(t1.transitions, t2.transitions):
            assert a.state == b.state and a.action == b.action and a.next_state == b.next_state


class TestTabularTaskValidation:
    def test_rejects_unnormalized_rows(self):
        task = make_chain_task()
        task.transitions[0, 0, 0] = 0.5
        with pytest.raises(ValueError, match="sums to"):
            task.validate()

    def test_rejects_mu_on_unsafe(self):
        task = make_chain_task(first_step_fail=True)
        task.initial_dist = np.zeros(5)
        task.initial_dist[1] = 1.0
        with pytest.raises(ValueError, match="failure states"):
            task.validate()

    def test_rejects_nonabsorbing_failure(self):
        task = make_chain_task(first_step_fail=True)
        task.transitions[1, 1] = 0.0
        task.transitions[1, 1, 2] = 1.0
        with pytest.raises(ValueError, match="absorbing"):
            task.validate()
