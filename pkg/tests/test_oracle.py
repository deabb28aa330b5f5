"""Exact-DP oracle tests. Expected values come from independent routes:
literal depth-first path enumeration, hand expansion of the recursion, and
Monte Carlo simulation."""

import numpy as np
import pytest

from sqrl.core import RngStream, TabularTask
from sqrl.envs import build_grid_mdp, generate_assumption_mdp
from sqrl.oracle import (bellman_residual, exact_failure_value, exact_qsafe,
                         fixed_point_masked, mask_exact, reachable_states,
                         verify_theorem)


def chain_task():
    """Safe start s0; action 0 risky (0.3 to the failure state), action 1 safe."""
    P = np.zeros((3, 2, 3))
    P[0, 0, 1], P[0, 0, 2] = 0.3, 0.7
    P[0, 1, 2] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    task = TabularTask(P, np.zeros((3, 2)), np.array([1.0, 0.0, 0.0]),
                       unsafe=np.array([False, True, False]))
    task.validate()
    return task


def random_task(rng: RngStream, n_states=5, n_actions=3, n_unsafe=1, p_goal=0.3,
                max_successors=3):
    unsafe = np.zeros(n_states, dtype=bool)
    unsafe[-n_unsafe:] = True
    goal = np.zeros(n_states, dtype=bool)
    if rng.uniform() < p_goal:
        goal[n_states - n_unsafe - 1] = True
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        if unsafe[s] or goal[s]:
            P[s, :, s] = 1.0
            continue
        for a in range(n_actions):
            k = 1 + int(rng.integers(0, max_successors))
            targets = rng.gen.choice(n_states, size=k, replace=False)
            w = rng.uniform(0.1, 1.0, size=k)
            P[s, a, targets] = w / w.sum()
    mu = np.zeros(n_states)
    free = np.flatnonzero(~unsafe & ~goal)
    mu[free] = 1.0 / len(free)
    task = TabularTask(P, np.zeros((n_states, n_actions)), mu, unsafe=unsafe, goal=goal)
    task.validate()
    return task


def random_policy(rng: RngStream, n_states, n_actions):
    p = rng.uniform(0.05, 1.0, size=(n_states, n_actions))
    return p / p.sum(axis=1, keepdims=True)


def qsafe_by_path_enumeration(task, policy, gamma, horizon, state, action):
    """Literal depth-first walk over every trajectory up to the horizon,
    accumulating probability * gamma^k at the first failure. Trajectories are
    grouped by their state path (summing the action choices at each step gives
    the exact same total). Truncation under-counts by <= gamma^horizon."""
    if task.unsafe[state]:
        return 1.0
    if task.goal[state]:
        return 0.0
    marginal = np.einsum("sa,sap->sp", policy, task.transitions)

    def from_state(s, depth):
        if task.unsafe[s]:
            return 1.0
        if task.goal[s] or depth == 0:
            return 0.0
        total = 0.0
        row = marginal[s]
        for sp in np.flatnonzero(row):
            total += row[sp] * gamma * from_state(sp, depth - 1)
        return total

    total = 0.0
    for sp in np.flatnonzero(task.transitions[state, action]):
        total += task.transitions[state, action, sp] * gamma * from_state(sp, horizon - 1)
    return total


class TestExactQsafe:
    def test_failure_states_are_one(self):
        task = chain_task()
        q = exact_qsafe(task, random_policy(RngStream(0), 3, 2), 0.7)
        assert np.all(q.values[1] == 1.0)

    def test_one_step_chain_value(self):
        task = chain_task()
        q = exact_qsafe(task, np.full((3, 2), 0.5), 0.7)
        assert q.values[0, 0] == pytest.approx(0.7 * 0.3, abs=1e-9)
        assert q.values[0, 1] == pytest.approx(0.0, abs=1e-9)

    def test_zero_on_safe_backbone(self):
        task = generate_assumption_mdp(6, 2, eps_min=0.1, seed=4)
        retreat_only = np.zeros((6, 2))
        retreat_only[:, 0] = 1.0
        q = exact_qsafe(task, retreat_only, 0.7)
        safe = ~task.unsafe
        assert np.all(q.values[safe, 0] == pytest.approx(0.0, abs=1e-9))

    def test_bellman_residual_small(self):
        rng = RngStream(9)
        for _ in range(5):
            task = random_task(rng)
            pi = random_policy(rng, task.n_states, task.n_actions)
            q = exact_qsafe(task, pi, 0.8, tol=1e-10)
            assert bellman_residual(task, pi, q) < 1e-9

    def test_values_in_unit_interval(self):
        rng = RngStream(10)
        for _ in range(10):
            task = random_task(rng)
            pi = random_policy(rng, task.n_states, task.n_actions)
            q = exact_qsafe(task, pi, 0.9)
            assert np.all(q.values >= -1e-12) and np.all(q.values <= 1.0 + 1e-12)

    def test_rejects_bad_policy(self):
        task = chain_task()
        bad = np.ones((3, 2))
        with pytest.raises(ValueError):
            exact_qsafe(task, bad, 0.7)

    def test_matches_path_enumeration_on_small_mdps(self):
        rng = RngStream(77)
        gamma = 0.65
        horizon = 8
        for _ in range(4):
            task = random_task(rng, n_states=5, n_actions=3)
            pi = random_policy(rng, 5, 3)
            q = exact_qsafe(task, pi, gamma)
            tol = gamma ** horizon + 1e-9
            for s in range(5):
                for a in range(3):
                    truncated = qsafe_by_path_enumeration(task, pi, gamma, horizon, s, a)
                    assert truncated - 1e-9 <= q.values[s, a] <= truncated + tol


class TestMasking:
    def test_direct_mask_application(self):
        task = TabularTask(
            np.tile(np.eye(3)[None, :, :], (3, 1, 1)).transpose(1, 0, 2) * 0
            + np.eye(3)[:, None, :],
            np.zeros((3, 3)), np.array([1.0, 0, 0]),
            unsafe=np.zeros(3, dtype=bool))
        # hand-build a Q table; dynamics are irrelevant to mask_exact
        from sqrl.oracle import QsafeTable
        q = QsafeTable(np.array([[0.05, 0.2, 0.5]] * 3), 0.7)
        masked = mask_exact(task, np.full((3, 3), 1 / 3), q, 0.1)
        assert np.allclose(masked.probs[0], [1.0, 0.0, 0.0])
        assert masked.normalizers[0] == pytest.approx(1 / 3)

    def test_eps_one_keeps_base_policy(self):
        task = chain_task()
        pi = np.array([[0.25, 0.75], [0.5, 0.5], [0.1, 0.9]])
        q = exact_qsafe(task, pi, 0.7)
        masked = mask_exact(task, pi, q, 1.0)
        # failure-state rows fall back (all values are 1 there); safe rows keep pi
        assert np.allclose(masked.probs[0], pi[0])
        assert np.allclose(masked.probs[2], pi[2])

    def test_all_blocked_falls_back_to_argmin(self):
        from sqrl.oracle import QsafeTable
        task = chain_task()
        q = QsafeTable(np.array([[0.4, 0.3], [1.0, 1.0], [0.2, 0.9]]), 0.7)
        masked = mask_exact(task, np.full((3, 2), 0.5), q, 0.1)
        assert np.allclose(masked.probs[0], [0.0, 1.0])
        assert 0 in masked.fallback_states

    def test_support_condition_exact(self):
        rng = RngStream(12)
        for _ in range(20):
            task = random_task(rng)
            pi = random_policy(rng, task.n_states, task.n_actions)
            q = exact_qsafe(task, pi, 0.7)
            for eps in (0.05, 0.1, 0.3):
                masked = mask_exact(task, pi, q, eps)
                support = masked.probs > 0
                safe_rows = ~task.unsafe
                for s in np.flatnonzero(safe_rows):
                    if s in masked.fallback_states:
                        continue
                    assert np.all(q.values[s][support[s]] < eps)

    def test_support_monotone_in_eps(self):
        rng = RngStream(13)
        from sqrl.oracle import QsafeTable
        task = random_task(rng, n_states=4, n_actions=4)
        pi = random_policy(rng, 4, 4)
        for _ in range(50):
            q = QsafeTable(rng.uniform(0, 1, size=(4, 4)), 0.7)
            prev = None
            for eps in (0.05, 0.1, 0.2, 0.5, 0.9):
                masked = mask_exact(task, pi, q, eps)
                support = masked.probs > 0
                if prev is not None:
                    for s in range(4):
                        if s in masked.fallback_states or s in prev_fallback:
                            continue
                        assert np.all(support[s] | ~prev[s])  # prev subset of current
                prev = support
                prev_fallback = masked.fallback_states


class TestFailureValue:
    def test_zero_for_safe_policy(self):
        task = generate_assumption_mdp(6, 2, eps_min=0.1, seed=1)
        retreat = np.zeros((6, 2))
        retreat[:, 0] = 1.0
        assert exact_failure_value(task, retreat, 0.7) == pytest.approx(0.0, abs=1e-12)

    def test_chain_value_equals_q(self):
        task = chain_task()
        risky = np.zeros((3, 2))
        risky[:, 0] = 1.0
        assert exact_failure_value(task, risky, 0.7) == pytest.approx(0.21, abs=1e-12)

    def test_monte_carlo_agreement(self):
        rng = RngStream(55)
        task = random_task(rng, n_states=6, n_actions=2)
        pi = random_policy(rng, 6, 2)
        gamma = 0.7
        v = exact_failure_value(task, pi, gamma)

        n = 100_000
        horizon = 64  # gamma^64 ~ 1e-10, far below the MC standard error
        sim = RngStream(56)
        states = np.searchsorted(np.cumsum(task.initial_dist),
                                 sim.uniform(size=n), side="right")
        returns = np.zeros(n)
        active = np.ones(n, dtype=bool)
        pi_cum = np.cumsum(pi, axis=1)
        P_cum = np.cumsum(task.transitions, axis=2)
        for t in range(horizon):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            s = states[idx]
            a = (sim.uniform(size=len(idx))[:, None] > pi_cum[s]).sum(axis=1)
            sp = (sim.uniform(size=len(idx))[:, None] > P_cum[s, a]).sum(axis=1)
            failed = task.unsafe[sp]
            returns[idx[failed]] = gamma ** (t + 1)
            done = failed | task.goal[sp]
            active[idx[done]] = False
            states[idx] = sp
        mc = float(np.mean(returns))
        se = float(np.std(returns) / np.sqrt(n))
        assert abs(v - mc) < 3 * max(se, 1e-6)


class TestFixedPointAndTheorem:
    def test_already_safe_policy_is_fixed_point(self):
        task = generate_assumption_mdp(6, 2, eps_min=0.15, seed=3)
        retreat = np.zeros((6, 2))
        retreat[:, 0] = 1.0
        masked, q, converged = fixed_point_masked(task, retreat, 0.7, 0.1)
        assert converged
        safe = ~task.unsafe
        assert np.allclose(masked.probs[safe], retreat[safe])

    def test_chain_masks_risky_action(self):
        task = chain_task()
        pi = np.full((3, 2), 0.5)
        masked, q, converged = fixed_point_masked(task, pi, 0.7, 0.1)
        assert converged
        assert masked.probs[0, 0] == 0.0
        assert masked.probs[0, 1] == 1.0

    def test_reachability(self):
        task = chain_task()
        right_only = np.zeros((3, 2))
        right_only[:, 1] = 1.0  # never touches the failure state
        reach = reachable_states(task, right_only)
        assert reach[0] and reach[2] and not reach[1]

    def test_theorem_bound_on_generated_mdps(self):
        rng = RngStream(99)
        for i in range(30):
            task = generate_assumption_mdp(
                5 + int(rng.uniform() * 10), 2 + int(rng.uniform() * 3),
                eps_min=0.21, seed=rng.split(1)[0])
            pi = random_policy(rng, task.n_states, task.n_actions)
            for eps in (0.05, 0.2):
                report = verify_theorem(task, pi, 0.7, eps)
                assert report.assumptions.all_pass
                if report.applicable:
                    assert report.bound_holds

    def test_assumption_violation_reported(self):
        task = chain_task()  # 0.3 mass into failure exceeds nothing; use eps=0.5
        report = verify_theorem(task, np.full((3, 2), 0.5), 0.7, 0.5)
        # mass 0.3 <= eps 0.5 violates the minimum-jump assumption
        assert not report.assumptions.all_pass

    def test_eps_one_is_trivial_bound(self):
        task = generate_assumption_mdp(8, 3, eps_min=0.3, seed=7)
        pi = random_policy(RngStream(1), 8, 3)
        masked, q, converged = fixed_point_masked(task, pi, 0.7, 0.999999)
        v = exact_failure_value(task, masked.probs, 0.7)
        assert v < 0.999999
