"""Core MDP abstractions: seeded RNG streams, safety-aware tasks, trajectories,
and replay buffers shared by every other module.

A task is an MDP ``(S, A, gamma, r, P, mu)`` extended with a binary failure
indicator over states. Failure states are terminal; goal states are modeled as
terminal too so that episode bootstrapping can treat them as zero-failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol

import numpy as np


class RngStream:
    """Deterministic random stream with hierarchical splitting.

    Identical seed plus identical call sequence gives bit-identical outputs.
    ``split(n)`` spawns independent child streams (experiment -> phase ->
    episode) so that changing one consumer's draw count cannot desynchronize
    another.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self.seq = seed
        else:
            self.seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self.seq))

    def split(self, n: int) -> list[RngStream]:
        return [RngStream(s) for s in self.seq.spawn(n)]

    # Thin delegation for the draws the toolkit actually uses.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def standard_normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice_index(self, probs: np.ndarray) -> int:
        """Draw an index from a 1-d probability vector."""
        u = self.gen.uniform()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


@dataclass
class Transition:
    """One step of experience. ``failed`` means the successor is a failure
    state; at most one of ``failed``/``reached_goal`` is set, and ``timed_out``
    only when neither is."""

    state: Any
    action: Any
    reward: float
    next_state: Any
    failed: bool = False
    reached_goal: bool = False
    timed_out: bool = False


TERMINAL_FAILURE = "failure"
TERMINAL_GOAL = "goal"
TERMINAL_TIMEOUT = "timeout"


@dataclass
class Trajectory:
    transitions: list[Transition]
    terminal_cause: str  # failure | goal | timeout

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> list:
        """Visited states: the initial state followed by every successor."""
        if not self.transitions:
            return []
        return [self.transitions[0].state] + [t.next_state for t in self.transitions]

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    @property
    def failed(self) -> bool:
        return self.terminal_cause == TERMINAL_FAILURE


class ReplayBuffer:
    """FIFO transition store with uniform-with-replacement minibatch sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0  # ring insertion point once full

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity

    def extend(self, transitions: Iterable[Transition]) -> None:
        for t in transitions:
            self.push(t)

    def sample(self, batch_size: int, rng: RngStream) -> list[Transition]:
        if len(self._items) < batch_size:
            raise ValueError(
                f"buffer holds {len(self._items)} transitions, cannot sample {batch_size}"
            )
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


class Policy(Protocol):
    def act(self, state, rng: RngStream): ...


class SafetyAwareTask(Protocol):
    """Interface every environment implements.

    ``initial_state`` samples from mu (zero mass on failure states), ``step``
    samples the successor and reward, and the indicator/goal predicates define
    episode termination. ``horizon`` bounds episode length.
    """

    horizon: int
    gamma: float

    def initial_state(self, rng: RngStream): ...

    def step(self, state, action, rng: RngStream): ...

    def is_failure(self, state) -> bool: ...

    def is_goal(self, state) -> bool: ...

    def validate_action(self, action) -> str | None:
        """Return an error description for an invalid action, else None."""
        ...


@dataclass
class TabularTask:
    """Finite safety-aware task with explicit transition tensor.

    ``transitions`` has shape (S, A, S) with rows summing to 1; ``unsafe`` and
    ``goal`` are boolean state masks. Unsafe and goal states are absorbing.
    """

    transitions: np.ndarray
    rewards: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    unsafe: np.ndarray  # (S,) bool
    goal: np.ndarray = None  # (S,) bool
    horizon: int = 30
    gamma: float = 0.99

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.unsafe = np.asarray(self.unsafe, dtype=bool)
        if self.goal is None:
            self.goal = np.zeros(self.n_states, dtype=bool)
        else:
            self.goal = np.asarray(self.goal, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def validate(self, atol: float = 1e-12) -> None:
        """Raise if transition rows are unnormalized, mu touches unsafe states,
        or terminal states are not absorbing."""
        P = self.transitions
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {P.shape}")
        row_sums = P.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=atol):
            bad = np.unravel_index(np.argmax(np.abs(row_sums - 1.0)), row_sums.shape)
            raise ValueError(f"transition row {bad} sums to {row_sums[bad]!r}")
        if np.any(P < 0):
            raise ValueError("negative transition probability")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution does not sum to 1")
        if np.any(self.initial_dist[self.unsafe] > 0):
            raise ValueError("initial distribution places mass on failure states")
        for mask, label in ((self.unsafe, "failure"), (self.goal, "goal")):
            for s in np.flatnonzero(mask):
                if not np.allclose(P[s, :, s], 1.0, atol=atol):
                    raise ValueError(f"{label} state {s} is not absorbing")

    # --- SafetyAwareTask interface -------------------------------------
    def initial_state(self, rng: RngStream) -> int:
        return rng.choice_index(self.initial_dist)

    def step(self, state: int, action: int, rng: RngStream):
        nxt = rng.choice_index(self.transitions[state, action])
        return nxt, float(self.rewards[state, action])

    def is_failure(self, state: int) -> bool:
        return bool(self.unsafe[state])

    def is_goal(self, state: int) -> bool:
        return bool(self.goal[state])

    def validate_action(self, action) -> str | None:
        a = int(action)
        if not 0 <= a < self.n_actions:
            return f"action {action} outside 0..{self.n_actions - 1}"
        return None


def rollout(policy: Policy, task: SafetyAwareTask, rng: RngStream) -> Trajectory:
    """Run one episode: sample s0 from mu, step until failure, goal, or the
    step count reaches the task horizon. Failure and goal states are never
    used as source states."""
    state = task.initial_state(rng)
    transitions: list[Transition] = []
    cause = TERMINAL_TIMEOUT
    for step_i in range(task.horizon):
        action = policy.act(state, rng)
        err = task.validate_action(action)
        if err is not None:
            raise ValueError(f"invalid action at step {step_i}: {err}")
        nxt, reward = task.step(state, action, rng)
        failed = task.is_failure(nxt)
        goal = not failed and task.is_goal(nxt)
        timed_out = (step_i == task.horizon - 1) and not failed and not goal
        transitions.append(
            Transition(state, action, reward, nxt, failed=failed,
                       reached_goal=goal, timed_out=timed_out)
        )
        if failed:
            cause = TERMINAL_FAILURE
            break
        if goal:
            cause = TERMINAL_GOAL
            break
        state = nxt
    return Trajectory(transitions, cause)
