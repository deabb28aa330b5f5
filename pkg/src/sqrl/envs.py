"""Environments: the drunk-spider navigation task (continuous and tabular)
and a random finite-MDP generator that realizes the masking theorem's
assumptions constructively.

Continuous layout (length units, arena 10 x 10):

    start  (1.0, 5.0) +- 0.25 jitter        goal disc  center (9.0, 5.0), r 0.5
    lava   [3.5, 6.5] x [5.6, 8.0]  (upper pit, closed rectangle)
    lava   [3.5, 6.5] x [2.0, 4.4]  (lower pit, closed rectangle)
    bridge [3.5, 6.5] x (4.4, 5.6)  (the corridor between the pits)

Dynamics: p' = clamp(p + a * scale + eta, arena) with eta uniform per axis in
[-eps_action, eps_action]. Reward is -0.05 * dist(p', goal) plus +10 on
entering the goal disc; safety is never encoded in the reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, TabularTask

ARENA_LOW = 0.0
ARENA_HIGH = 10.0
START_CENTER = np.array([1.0, 5.0])
START_JITTER = 0.25
GOAL_CENTER = np.array([9.0, 5.0])
GOAL_RADIUS = 0.5
LAVA_RECTS = (
    (3.5, 6.5, 5.6, 8.0),  # upper pit: (x_min, x_max, y_min, y_max)
    (3.5, 6.5, 2.0, 4.4),  # lower pit
)
BRIDGE_X = (3.5, 6.5)
BRIDGE_Y = (4.4, 5.6)  # open interval between the closed lava rectangles
DIST_REWARD_COEF = -0.05
GOAL_BONUS = 10.0
DEFAULT_EPISODE_LENGTH = 30


def in_lava(pos) -> bool:
    x, y = float(pos[0]), float(pos[1])
    for x0, x1, y0, y1 in LAVA_RECTS:
        if x0 <= x <= x1 and y0 <= y <= y1:
            return True
    return False


def in_goal(pos) -> bool:
    return float(np.hypot(pos[0] - GOAL_CENTER[0], pos[1] - GOAL_CENTER[1])) <= GOAL_RADIUS


def in_bridge(pos) -> bool:
    x, y = float(pos[0]), float(pos[1])
    return BRIDGE_X[0] <= x <= BRIDGE_X[1] and BRIDGE_Y[0] < y < BRIDGE_Y[1]


@dataclass
class DrunkSpiderContinuous:
    """2-d navigation across (or around) a bridge between two lava pits."""

    action_noise: float = 0.1
    action_scale: float = 1.0
    horizon: int = DEFAULT_EPISODE_LENGTH
    gamma: float = 0.99

    state_dim: int = 2
    action_dim: int = 2

    def initial_state(self, rng: RngStream) -> np.ndarray:
        return START_CENTER + rng.uniform(-START_JITTER, START_JITTER, size=2)

    def validate_action(self, action) -> str | None:
        a = np.asarray(action, dtype=float)
        if a.shape != (2,):
            return f"action shape {a.shape} != (2,)"
        if np.any(np.abs(a) > 1.0 + 1e-12):
            return f"action {a} outside [-1, 1]^2"
        return None

    def step(self, state, action, rng: RngStream):
        err = self.validate_action(action)
        if err is not None:
            raise ValueError(err)
        if in_lava(state):
            raise ValueError("cannot step from a failure state")
        a = np.asarray(action, dtype=float)
        noise = rng.uniform(-self.action_noise, self.action_noise, size=2) \
            if self.action_noise > 0 else np.zeros(2)
        nxt = np.clip(state + a * self.action_scale + noise, ARENA_LOW, ARENA_HIGH)
        reward = DIST_REWARD_COEF * float(np.linalg.norm(nxt - GOAL_CENTER))
        if in_goal(nxt):
            reward += GOAL_BONUS
        return nxt, reward

    def is_failure(self, state) -> bool:
        return in_lava(state)

    def is_goal(self, state) -> bool:
        return in_goal(state)


class WaypointPolicy:
    """Scripted controller that walks a sequence of waypoints (used to certify
    that the around-path avoids lava under bounded noise)."""

    # Over the top: climb, cross above the upper pit at y=9, descend to goal.
    AROUND = ((1.0, 9.0), (9.0, 9.0), (9.0, 5.0))

    def __init__(self, waypoints=AROUND, reach_tol: float = 0.3):
        self.waypoints = [np.asarray(w, dtype=float) for w in waypoints]
        self.reach_tol = reach_tol
        self._idx = 0

    def reset(self):
        self._idx = 0

    def act(self, state, rng: RngStream) -> np.ndarray:
        while (self._idx < len(self.waypoints) - 1
               and np.linalg.norm(state - self.waypoints[self._idx]) < self.reach_tol):
            self._idx += 1
        return np.clip(self.waypoints[self._idx] - state, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Tabular mirror of the continuous layout
# ---------------------------------------------------------------------------

GRID_ACTIONS = ("up", "down", "left", "right", "stay")
_GRID_MOVES = {
    "up": (0, 1),
    "down": (0, -1),
    "left": (-1, 0),
    "right": (1, 0),
    "stay": (0, 0),
}


@dataclass
class GridLayout:
    """Cell-level description of the drunk-spider grid. ``width`` columns span
    x in [0, 10], ``height`` rows span y in [0, 10]; a cell is lava iff its
    center lies in a continuous lava rectangle."""

    width: int = 12
    height: int = 10

    def cell_center(self, col: int, row: int) -> np.ndarray:
        return np.array([
            (col + 0.5) * (ARENA_HIGH / self.width),
            (row + 0.5) * (ARENA_HIGH / self.height),
        ])

    def cell_of(self, pos) -> tuple[int, int]:
        col = min(int(pos[0] / (ARENA_HIGH / self.width)), self.width - 1)
        row = min(int(pos[1] / (ARENA_HIGH / self.height)), self.height - 1)
        return col, row

    def index(self, col: int, row: int) -> int:
        return row * self.width + col

    def coords(self, idx: int) -> tuple[int, int]:
        return idx % self.width, idx // self.width

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def lava_cells(self) -> list[int]:
        return [self.index(c, r) for r in range(self.height) for c in range(self.width)
                if in_lava(self.cell_center(c, r))]

    def start_cell(self) -> int:
        return self.index(*self.cell_of(START_CENTER))

    def goal_cell(self) -> int:
        return self.index(*self.cell_of(GOAL_CENTER))


def build_grid_mdp(width: int = 12, height: int = 10, p_slip: float = 0.1,
                   horizon: int = DEFAULT_EPISODE_LENGTH, gamma: float = 0.99) -> TabularTask:
    """Dense tabular drunk spider. With probability ``p_slip`` the realized
    move is a uniformly random directional move (the intended move therefore
    receives 1 - p_slip plus its p_slip / 4 share). Failure and goal cells are
    absorbing; moves off the grid stay in place."""
    if width <= 0 or height <= 0:
        raise ValueError("layout dimensions must be positive")
    if not 0.0 <= p_slip < 1.0:
        raise ValueError(f"p_slip must be in [0, 1), got {p_slip}")
    layout = GridLayout(width, height)
    n = layout.n_cells
    n_a = len(GRID_ACTIONS)
    lava = np.zeros(n, dtype=bool)
    lava[layout.lava_cells()] = True
    start, goal = layout.start_cell(), layout.goal_cell()
    if lava[start] or lava[goal]:
        raise ValueError("start or goal cell lies inside lava")

    def move_target(idx: int, name: str) -> int:
        c, r = layout.coords(idx)
        dc, dr = _GRID_MOVES[name]
        c2, r2 = c + dc, r + dr
        if not (0 <= c2 < width and 0 <= r2 < height):
            return idx
        return layout.index(c2, r2)

    P = np.zeros((n, n_a, n))
    directional = [a for a in GRID_ACTIONS if a != "stay"]
    for s in range(n):
        if lava[s] or s == goal:
            P[s, :, s] = 1.0
            continue
        for ai, name in enumerate(GRID_ACTIONS):
            P[s, ai, move_target(s, name)] += 1.0 - p_slip
            for d in directional:
                P[s, ai, move_target(s, d)] += p_slip / 4.0

    goal_mask = np.zeros(n, dtype=bool)
    goal_mask[goal] = True
    r = np.zeros((n, n_a))
    for s in range(n):
        if lava[s] or goal_mask[s]:
            continue
        c, row = layout.coords(s)
        r[s, :] = DIST_REWARD_COEF * np.linalg.norm(layout.cell_center(c, row) - GOAL_CENTER)
    mu = np.zeros(n)
    mu[start] = 1.0
    task = TabularTask(P, r, mu, unsafe=lava, goal=goal_mask, horizon=horizon, gamma=gamma)
    task.validate()
    return task


# ---------------------------------------------------------------------------
# Tabular-MDP JSON interchange (consumed by the oracle CLI path)
# ---------------------------------------------------------------------------

def tabular_to_json_dict(task: TabularTask) -> dict:
    return {
        "n_states": task.n_states,
        "n_actions": task.n_actions,
        "P": task.transitions.tolist(),
        "r": task.rewards.tolist(),
        "mu": task.initial_dist.tolist(),
        "unsafe": [int(s) for s in np.flatnonzero(task.unsafe)],
    }


def tabular_from_json_dict(doc: dict) -> TabularTask:
    n, n_a = int(doc["n_states"]), int(doc["n_actions"])
    P = np.asarray(doc["P"], dtype=float)
    if P.shape != (n, n_a, n):
        raise ValueError(f"P shape {P.shape} does not match ({n}, {n_a}, {n})")
    unsafe = np.zeros(n, dtype=bool)
    unsafe[list(doc["unsafe"])] = True
    task = TabularTask(P, np.asarray(doc["r"], dtype=float),
                       np.asarray(doc["mu"], dtype=float), unsafe=unsafe)
    task.validate()
    return task


# ---------------------------------------------------------------------------
# Random MDPs satisfying the safety assumptions
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    """Exhaustive scan of the two structural safety assumptions.

    ``small_unsafe_mass`` holds (s, a, s') witnesses whose transition mass into
    an unsafe state lies in (0, eps]; ``states_without_safe_action`` holds safe
    states where every action has positive unsafe mass."""

    epsilon: float
    small_unsafe_mass: list = field(default_factory=list)
    states_without_safe_action: list = field(default_factory=list)

    @property
    def assumption2_pass(self) -> bool:
        return not self.small_unsafe_mass

    @property
    def assumption4_pass(self) -> bool:
        return not self.states_without_safe_action

    @property
    def all_pass(self) -> bool:
        return self.assumption2_pass and self.assumption4_pass


def check_assumptions(task: TabularTask, epsilon: float) -> AssumptionReport:
    """Scan every (s, a, s'): mass into unsafe states must be 0 or > epsilon,
    and every safe state must own at least one action with zero unsafe mass."""
    report = AssumptionReport(epsilon=epsilon)
    P = task.transitions
    unsafe_idx = np.flatnonzero(task.unsafe)
    for s in range(task.n_states):
        for a in range(task.n_actions):
            for sp in unsafe_idx:
                mass = P[s, a, sp]
                if 0.0 < mass <= epsilon:
                    report.small_unsafe_mass.append((s, a, int(sp), float(mass)))
    unsafe_mass_per_action = P[:, :, task.unsafe].sum(axis=2)  # (S, A)
    for s in np.flatnonzero(~task.unsafe):
        if not np.any(unsafe_mass_per_action[s] == 0.0):
            report.states_without_safe_action.append(int(s))
    return report


def generate_assumption_mdp(n_states: int, n_actions: int, eps_min: float,
                            seed: int | RngStream, unsafe_frac: float = 0.2,
                            max_unsafe_mass: float = 0.5) -> TabularTask:
    """Random finite MDP built so both assumptions hold by construction.

    State 0 is a safe absorbing backbone; action 0 is a retreat that jumps
    straight to it from every safe state (zero unsafe mass). Other actions mix
    random safe mass with unsafe masses that are each strictly above
    ``eps_min`` or exactly zero. The initial distribution is uniform over the
    non-backbone safe states.
    """
    if n_states < 3:
        raise ValueError("need at least 3 states (backbone, one safe, one unsafe)")
    if n_actions < 1:
        raise ValueError("need at least 1 action")
    n_unsafe = max(1, int(round(unsafe_frac * n_states)))
    if n_unsafe > n_states - 2:
        raise ValueError("too many unsafe states requested")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)

    unsafe = np.zeros(n_states, dtype=bool)
    unsafe[n_states - n_unsafe:] = True
    safe_idx = np.flatnonzero(~unsafe)
    unsafe_idx = np.flatnonzero(unsafe)
    backbone = 0

    P = np.zeros((n_states, n_actions, n_states))
    for s in unsafe_idx:
        P[s, :, s] = 1.0
    P[backbone, :, backbone] = 1.0
    for s in safe_idx:
        if s == backbone:
            continue
        P[s, 0, backbone] = 1.0  # retreat action: all mass on the safe backbone
        for a in range(1, n_actions):
            # Pick unsafe targets; each receives mass strictly above eps_min.
            budget = 0.0
            for sp in unsafe_idx:
                if rng.uniform() < 0.5:
                    continue
                mass = eps_min * (1.05 + rng.uniform())
                if budget + mass > max_unsafe_mass:
                    continue
                P[s, a, sp] = mass
                budget += mass
            w = rng.uniform(0.05, 1.0, size=len(safe_idx))
            P[s, a, safe_idx] = (1.0 - budget) * w / w.sum()
    if n_actions == 1:
        # The retreat action is the only action; assumptions hold trivially.
        pass

    mu = np.zeros(n_states)
    others = [s for s in safe_idx if s != backbone]
    mu[others] = 1.0 / len(others)

    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rewards[unsafe_idx] = 0.0
    task = TabularTask(P, rewards, mu, unsafe=unsafe)
    task.validate()
    report = check_assumptions(task, eps_min)
    if not report.all_pass:
        raise AssertionError(f"generator postcondition violated: {report}")
    return task
