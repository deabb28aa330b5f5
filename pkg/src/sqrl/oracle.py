"""Exact dynamic programming on finite safety-aware tasks.

The central object is the failure Q-table: the discounted probability of ever
entering a failure state,

    Q(s, a) = I(s) + (1 - I(s)) * g * sum_s' P(s'|s,a) sum_a' pi(a'|s') Q(s', a'),

with failure states absorbing at value 1 and goal terminals at value 0
(discount ``g`` strictly inside (0, 1), so the fixed point is unique). On top
of it: exact masking of a policy at a threshold, the self-consistent masked
fixed point, and a numerical check that the masked policy's expected
discounted failure stays below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import TabularTask
from .envs import AssumptionReport, check_assumptions

DEFAULT_TOL = 1e-10


def _check_policy(task: TabularTask, policy: np.ndarray) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (task.n_states, task.n_actions):
        raise ValueError(f"policy shape {pi.shape} != ({task.n_states}, {task.n_actions})")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("policy rows must be nonnegative and sum to 1")
    return pi


@dataclass
class QsafeTable:
    """Failure Q-values in [0, 1] for one policy, plus the discount they were
    solved under."""

    values: np.ndarray  # (S, A)
    gamma_safe: float

    def state_values(self, policy: np.ndarray) -> np.ndarray:
        return (policy * self.values).sum(axis=1)


def exact_qsafe(task: TabularTask, policy: np.ndarray, gamma_safe: float,
                tol: float = DEFAULT_TOL, max_iters: int = 100_000) -> QsafeTable:
    """Solve the failure Bellman equation by fixed-point iteration until the
    sup-norm change drops below ``tol``."""
    if not 0.0 < gamma_safe < 1.0:
        raise ValueError(f"gamma_safe must be in (0, 1), got {gamma_safe}")
    pi = _check_policy(task, policy)
    P = task.transitions
    unsafe = task.unsafe
    goal = task.goal
    Q = np.zeros((task.n_states, task.n_actions))
    Q[unsafe, :] = 1.0
    for _ in range(max_iters):
        V = (pi * Q).sum(axis=1)
        V[unsafe] = 1.0
        V[goal] = 0.0
        Q_new = gamma_safe * (P @ V)
        Q_new[unsafe, :] = 1.0
        Q_new[goal, :] = 0.0
        delta = np.max(np.abs(Q_new - Q))
        Q = Q_new
        if delta < tol:
            break
    return QsafeTable(values=Q, gamma_safe=gamma_safe)


@dataclass
class MaskedTabularPolicy:
    """A base policy renormalized over actions whose failure Q-value is
    strictly below the threshold.

    ``normalizers[s]`` is the base-policy mass surviving the mask at s. Where
    it is zero the policy falls back to a point mass on the action with the
    lowest failure value; those states are listed in ``fallback_states``.
    """

    base: np.ndarray
    qsafe: QsafeTable
    epsilon: float
    probs: np.ndarray
    normalizers: np.ndarray
    fallback_states: list = field(default_factory=list)


def mask_exact(task: TabularTask, policy: np.ndarray, qsafe: QsafeTable,
               epsilon: float) -> MaskedTabularPolicy:
    """Apply the masking projection: keep base mass only on actions with
    Q(s, a) < epsilon, renormalized per state."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pi = _check_policy(task, policy)
    safe_mask = qsafe.values < epsilon
    masked = np.where(safe_mask, pi, 0.0)
    Z = masked.sum(axis=1)
    out = np.zeros_like(pi)
    fallback_states = []
    for s in range(task.n_states):
        if Z[s] > 0:
            out[s] = masked[s] / Z[s]
        else:
            out[s, int(np.argmin(qsafe.values[s]))] = 1.0
            if not task.unsafe[s]:
                fallback_states.append(s)
    return MaskedTabularPolicy(base=pi, qsafe=qsafe, epsilon=epsilon,
                               probs=out, normalizers=Z,
                               fallback_states=fallback_states)


def exact_failure_value(task: TabularTask, policy: np.ndarray,
                        gamma_safe: float) -> float:
    """Expected discounted failure indicator from the initial distribution,
    solved exactly as a linear system over safe states."""
    pi = _check_policy(task, policy)
    P_pi = np.einsum("sa,sap->sp", pi, task.transitions)
    V = np.zeros(task.n_states)
    V[task.unsafe] = 1.0
    free = ~task.unsafe & ~task.goal
    idx = np.flatnonzero(free)
    if len(idx) > 0:
        A = np.eye(len(idx)) - gamma_safe * P_pi[np.ix_(idx, idx)]
        b = gamma_safe * P_pi[idx][:, task.unsafe].sum(axis=1)
        V[idx] = np.linalg.solve(A, b)
    return float(task.initial_dist @ V)


def reachable_states(task: TabularTask, policy: np.ndarray) -> np.ndarray:
    """Boolean mask of states reachable from the initial distribution under
    the policy's support."""
    P_pi = np.einsum("sa,sap->sp", policy, task.transitions)
    reach = task.initial_dist > 0
    frontier = reach.copy()
    while frontier.any():
        nxt = (P_pi[frontier] > 0).any(axis=0) & ~reach
        reach |= nxt
        frontier = nxt
    return reach


def fixed_point_masked(task: TabularTask, base_policy: np.ndarray, gamma_safe: float,
                       epsilon: float, max_iters: int = 100,
                       tol: float = DEFAULT_TOL):
    """Alternate exact evaluation and re-masking until the masked support
    stabilizes; detects support cycles as non-convergence.

    Returns (masked_policy, qsafe_of_masked_policy, converged).
    """
    pi = _check_policy(task, base_policy)
    current = pi
    seen_supports: list = []
    masked = None
    qs = None
    converged = False
    for _ in range(max_iters):
        qs = exact_qsafe(task, current, gamma_safe, tol=tol)
        masked = mask_exact(task, pi, qs, epsilon)
        support = masked.probs > 0
        key = support.tobytes()
        if seen_supports and key == seen_supports[-1]:
            converged = True
            break
        if key in seen_supports:  # cycle without settling
            break
        seen_supports.append(key)
        current = masked.probs
    return masked, qs, converged


@dataclass
class TheoremReport:
    assumptions: AssumptionReport
    converged: bool
    fallback_states: list
    reachable_fallback: list
    failure_value: float
    epsilon: float

    @property
    def applicable(self) -> bool:
        """Preconditions of the safety bound: assumptions hold, the masked
        fixed point converged, and no reachable state lost all safe actions."""
        return self.assumptions.all_pass and self.converged and not self.reachable_fallback

    @property
    def bound_holds(self) -> bool:
        return self.failure_value < self.epsilon

    @property
    def margin(self) -> float:
        return self.epsilon - self.failure_value


def verify_theorem(task: TabularTask, base_policy: np.ndarray, gamma_safe: float,
                   epsilon: float) -> TheoremReport:
    """Numerically check the masking safety bound on one finite task: build
    the self-consistent masked policy and compare its exact discounted failure
    value against the threshold."""
    assumptions = check_assumptions(task, epsilon)
    masked, qs, converged = fixed_point_masked(task, base_policy, gamma_safe, epsilon)
    reach = reachable_states(task, masked.probs)
    reachable_fallback = [s for s in masked.fallback_states if reach[s]]
    value = exact_failure_value(task, masked.probs, gamma_safe)
    return TheoremReport(
        assumptions=assumptions,
        converged=converged,
        fallback_states=masked.fallback_states,
        reachable_fallback=reachable_fallback,
        failure_value=value,
        epsilon=epsilon,
    )


def bellman_residual(task: TabularTask, policy: np.ndarray, qsafe: QsafeTable) -> float:
    """Sup-norm residual of a Q-table against its own Bellman equation."""
    pi = _check_policy(task, policy)
    V = (pi * qsafe.values).sum(axis=1)
    V[task.unsafe] = 1.0
    V[task.goal] = 0.0
    rhs = qsafe.gamma_safe * (task.transitions @ V)
    rhs[task.unsafe, :] = 1.0
    rhs[task.goal, :] = 0.0
    return float(np.max(np.abs(rhs - qsafe.values)))
