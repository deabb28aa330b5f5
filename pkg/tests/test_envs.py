import json

import numpy as np
import pytest

from sqrl.core import RngStream, rollout
from sqrl.envs import (DrunkSpiderContinuous, GridLayout, WaypointPolicy,
                       build_grid_mdp, check_assumptions, generate_assumption_mdp,
                       in_bridge, in_goal, in_lava, tabular_from_json_dict,
                       tabular_to_json_dict, GRID_ACTIONS)


class TestContinuousStep:
    def test_zero_action_zero_noise(self):
        env = DrunkSpiderContinuous(action_noise=0.0)
        nxt, reward = env.step(np.array([1.0, 5.0]), np.array([0.0, 0.0]), RngStream(0))
        assert np.allclose(nxt, [1.0, 5.0])
        assert reward == pytest.approx(-0.05 * 8.0)

    def test_step_into_upper_lava(self):
        env = DrunkSpiderContinuous(action_noise=0.0)
        nxt, _ = env.step(np.array([5.0, 5.0]), np.array([0.0, 1.0]), RngStream(0))
        assert np.allclose(nxt, [5.0, 6.0])
        assert env.is_failure(nxt)

    def test_step_into_goal_disc(self):
        env = DrunkSpiderContinuous(action_noise=0.0)
        nxt, reward = env.step(np.array([8.6, 5.0]), np.array([0.5, 0.0]), RngStream(0))
        assert np.allclose(nxt, [9.1, 5.0])
        assert env.is_goal(nxt)
        assert reward == pytest.approx(10.0 - 0.05 * 0.1)

    def test_out_of_range_action(self):
        env = DrunkSpiderContinuous()
        with pytest.raises(ValueError, match="outside"):
            env.step(np.array([1.0, 5.0]), np.array([1.5, 0.0]), RngStream(0))

    def test_clamped_to_arena(self):
        env = DrunkSpiderContinuous(action_noise=0.0)
        nxt, _ = env.step(np.array([0.2, 9.8]), np.array([-1.0, 1.0]), RngStream(0))
        assert nxt[0] == 0.0 and nxt[1] == 10.0

    def test_start_jitter_range(self):
        env = DrunkSpiderContinuous()
        rng = RngStream(3)
        for _ in range(200):
            s = env.initial_state(rng)
            assert 0.75 <= s[0] <= 1.25 and 4.75 <= s[1] <= 5.25
            assert not env.is_failure(s)

    def test_reward_ignores_safety(self):
        # same distance-to-goal, one point safe and one in lava: identical reward
        env = DrunkSpiderContinuous(action_noise=0.0)
        p_safe = np.array([9.0, 8.0])     # distance 3 from goal
        p_lava_next = np.array([5.0, 6.8])
        d = np.linalg.norm(p_lava_next - np.array([9.0, 5.0]))
        nxt, r = env.step(np.array([5.0, 5.79]), np.array([0.0, 1.0]), RngStream(0))
        assert env.is_failure(nxt)
        assert r == pytest.approx(-0.05 * np.linalg.norm(nxt - np.array([9.0, 5.0])))
        _, r_safe = env.step(p_safe, np.array([0.0, 0.0]), RngStream(0))
        assert r_safe == pytest.approx(-0.05 * 3.0)
        assert d > 0  # sanity


class TestGeometry:
    def test_lava_rectangles_closed(self):
        assert in_lava((3.5, 5.6)) and in_lava((6.5, 8.0))
        assert in_lava((3.5, 2.0)) and in_lava((6.5, 4.4))
        assert not in_lava((3.49, 5.6)) and not in_lava((6.51, 4.4))

    def test_bridge_open_interval(self):
        assert in_bridge((5.0, 5.0))
        assert not in_bridge((5.0, 4.4)) and not in_bridge((5.0, 5.6))
        assert not in_bridge((3.49, 5.0))

    def test_goal_disc(self):
        assert in_goal((9.0, 5.0)) and in_goal((9.5, 5.0))
        assert not in_goal((9.51, 5.0))

    def test_start_and_goal_outside_lava(self):
        assert not in_lava((1.0, 5.0)) and not in_lava((9.0, 5.0))


class TestWaypointSafety:
    def test_around_path_is_failure_free_at_noise_point_two(self):
        env = DrunkSpiderContinuous(action_noise=0.2)
        rng = RngStream(2024)
        failures = 0
        for _ in range(1000):
            policy = WaypointPolicy()
            traj = rollout(policy, env, rng)
            failures += traj.failed
        assert failures == 0


class TestGridMdp:
    def test_one_hot_rows_without_slip(self):
        task = build_grid_mdp(p_slip=0.0)
        free = ~(task.unsafe | task.goal)
        rows = task.transitions[free]
        assert np.all(np.max(rows, axis=2) == 1.0)

    def test_slip_shares(self):
        task = build_grid_mdp(p_slip=0.2)
        layout = GridLayout(12, 10)
        s = layout.index(1, 1)  # interior, far from lava, moves all distinct
        up = GRID_ACTIONS.index("up")
        probs = task.transitions[s, up]
        up_target = layout.index(1, 2)
        assert probs[up_target] == pytest.approx(0.8 + 0.05)
        for name, expected in (("down", 0.05), ("left", 0.05), ("right", 0.05)):
            c, r = 1, 1
            dc, dr = {"down": (0, -1), "left": (-1, 0), "right": (1, 0)}[name]
            assert probs[layout.index(c + dc, r + dr)] == pytest.approx(expected)
        assert probs[s] == 0.0  # stay receives nothing when moving up

    def test_rows_sum_to_one(self):
        task = build_grid_mdp(p_slip=0.13)
        sums = task.transitions.sum(axis=2)
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_absorbing_terminals(self):
        task = build_grid_mdp(p_slip=0.1)
        for s in np.flatnonzero(task.unsafe | task.goal):
            assert np.all(task.transitions[s, :, s] == 1.0)

    def test_layout_consistency_with_continuous(self):
        layout = GridLayout(12, 10)
        task = build_grid_mdp()
        for idx in range(layout.n_cells):
            c, r = layout.coords(idx)
            assert task.unsafe[idx] == in_lava(layout.cell_center(c, r))

    def test_invalid_p_slip(self):
        with pytest.raises(ValueError):
            build_grid_mdp(p_slip=1.0)

    def test_json_round_trip(self):
        task = build_grid_mdp(p_slip=0.1)
        doc = tabular_to_json_dict(task)
        blob = json.dumps(doc)
        task2 = tabular_from_json_dict(json.loads(blob))
        assert np.allclose(task.transitions, task2.transitions)
        assert np.array_equal(task.unsafe, task2.unsafe)
        assert np.allclose(task.initial_dist, task2.initial_dist)


class TestAssumptionMdp:
    def test_generator_postcondition_over_seeds(self):
        for seed in range(100):
            task = generate_assumption_mdp(8, 3, eps_min=0.05, seed=seed)
            report = check_assumptions(task, 0.05)
            assert report.all_pass

    def test_unsafe_masses_above_eps_min(self):
        for seed in range(100):
            task = generate_assumption_mdp(10, 3, eps_min=0.05, seed=seed)
            masses = task.transitions[:, :, task.unsafe]
            positive = masses[masses > 0]
            assert np.all(positive > 0.05)

    def test_single_action_backbone(self):
        task = generate_assumption_mdp(3, 1, eps_min=0.05, seed=0)
        unsafe_mass = task.transitions[:, :, task.unsafe].sum(axis=2)
        for s in np.flatnonzero(~task.unsafe):
            assert unsafe_mass[s, 0] == 0.0

    def test_check_assumptions_witnesses(self):
        task = build_grid_mdp(p_slip=0.0)
        report = check_assumptions(task, 0.05)
        assert report.assumption2_pass and report.assumption4_pass

        # plant a small unsafe transition
        bad = build_grid_mdp(p_slip=0.0)
        lava = int(np.flatnonzero(bad.unsafe)[0])
        s = int(np.flatnonzero(~bad.unsafe)[0])
        bad.transitions[s, 0] *= 0.99
        bad.transitions[s, 0, lava] += 0.01
        rep = check_assumptions(bad, 0.05)
        assert not rep.assumption2_pass
        assert (s, 0, lava, pytest.approx(0.01)) in [
            (w[0], w[1], w[2], pytest.approx(w[3])) for w in rep.small_unsafe_mass
        ] or any(w[0] == s and w[1] == 0 and w[2] == lava for w in rep.small_unsafe_mass)

    def test_assumption4_failure_witness(self):
        bad = build_grid_mdp(p_slip=0.0)
        lava = int(np.flatnonzero(bad.unsafe)[0])
        s = int(np.flatnonzero(~(bad.unsafe | bad.goal))[0])
        for a in range(bad.n_actions):
            bad.transitions[s, a] = 0.0
            bad.transitions[s, a, lava] = 0.3
            bad.transitions[s, a, s] = 0.7
        rep = check_assumptions(bad, 0.05)
        assert s in rep.states_without_safe_action

    def test_infeasible_parameters(self):
        with pytest.raises(ValueError):
            generate_assumption_mdp(2, 2, eps_min=0.05, seed=0)
