"""Safety critic (discounted failure-probability estimator) and the masked
sampling policy that filters candidate actions through it.

The critic regresses toward one-step Bellman targets built from a delayed
target copy; next actions are drawn from the unconstrained base policy, which
keeps an immature critic from poisoning its own targets with pessimism. The
sampler realizes the masking projection by rejection: draw candidates from the
base policy, keep those the critic scores strictly below the threshold, and
fall back to the lowest-scoring candidate when none qualify.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, Transition
from .nn import AdamState, Mlp, adam_step, polyak_blend
from .sac import stack_batch


def concat_features(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1)


class ContinuousFeatures:
    """Featurization [normalized state, raw action]."""

    def __init__(self, state_loc: float = 0.0, state_scale: float = 1.0):
        self.state_loc = float(state_loc)
        self.state_scale = float(state_scale)

    def __call__(self, states, actions):
        s = (np.atleast_2d(states) - self.state_loc) / self.state_scale
        return np.concatenate([s, np.atleast_2d(actions)], axis=-1)


def make_continuous_features(state_loc: float = 0.0, state_scale: float = 1.0):
    return ContinuousFeatures(state_loc, state_scale)


class OneHotFeatures:
    """Tabular featurization: one-hot state next to one-hot action."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions

    def __call__(self, states, actions):
        s = np.atleast_1d(np.asarray(states, dtype=int))
        a = np.atleast_1d(np.asarray(actions, dtype=int))
        out = np.zeros((len(s), self.n_states + self.n_actions))
        out[np.arange(len(s)), s] = 1.0
        out[np.arange(len(a)), self.n_states + a] = 1.0
        return out


def make_onehot_features(n_states: int, n_actions: int):
    return OneHotFeatures(n_states, n_actions)


class SafetyCritic:
    """Sigmoid-output network estimating the discounted probability of a
    future failure for a state-action pair, with a delayed target copy."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...], gamma_safe: float,
                 rng: RngStream, lr: float = 3e-4, tau: float = 0.005,
                 features=concat_features):
        if not 0.0 < gamma_safe < 1.0:
            raise ValueError(f"gamma_safe must be in (0, 1), got {gamma_safe}")
        self.net = Mlp([input_dim, *hidden, 1], "sigmoid", rng)
        self.target = self.net.clone()
        self.gamma_safe = gamma_safe
        self.opt = AdamState.for_params(self.net.params, lr=lr)
        self.tau = tau
        self.features = features

    def value(self, states, actions) -> np.ndarray:
        return self.net.forward(self.features(states, actions))[:, 0]

    def target_value(self, states, actions) -> np.ndarray:
        return self.target.forward(self.features(states, actions))[:, 0]

    def value_one(self, state, action) -> float:
        return float(self.value(_one(state), _one(action))[0])

    def sync_target(self, tau: float | None = None) -> None:
        polyak_blend(self.net.params, self.target.params, self.tau if tau is None else tau)


def _one(x):
    arr = np.asarray(x)
    return arr[None] if arr.ndim <= 1 else arr


def safety_bellman_targets(critic: SafetyCritic, batch, base_policy,
                           rng: RngStream) -> np.ndarray:
    """Vectorized targets: failure collapses the recursion to gamma_safe * 1
    (the failure state's value is identically 1), goal terminals contribute 0,
    everything else bootstraps gamma_safe * target(s', a') with a' drawn from
    the unconstrained base policy."""
    a2 = base_policy_actions(base_policy, batch.next_states, rng)
    boot = critic.gamma_safe * critic.target_value(batch.next_states, a2)
    return np.where(batch.failed, critic.gamma_safe,
                    np.where(batch.reached_goal, 0.0, boot))


def safety_bellman_target(critic: SafetyCritic, transition: Transition,
                          base_policy, rng: RngStream) -> float:
    if transition.failed:
        return critic.gamma_safe
    if transition.reached_goal:
        return 0.0
    a2 = base_policy_actions(base_policy, _one(transition.next_state), rng)
    return float(critic.gamma_safe
                 * critic.target_value(_one(transition.next_state), a2)[0])


def base_policy_actions(base_policy, states, rng: RngStream):
    """Draw one action per state from whatever policy object we were handed
    (continuous SAC policy or a tabular sampler)."""
    actions, _ = base_policy.sample(states, rng)
    return actions


class TabularPolicySampler:
    """Adapts a stochastic policy matrix to the sampling interface used by the
    safety-critic updates."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, dtype=float)

    def sample(self, states, rng: RngStream):
        s = np.atleast_1d(np.asarray(states, dtype=int))
        u = rng.uniform(size=len(s))
        cum = np.cumsum(self.probs[s], axis=1)
        actions = (u[:, None] > cum).sum(axis=1)
        return actions, None

    def act(self, state, rng: RngStream) -> int:
        return int(self.sample(np.array([state]), rng)[0][0])


@dataclass
class SafetyBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    failed: np.ndarray
    reached_goal: np.ndarray


def stack_safety_batch(transitions: list[Transition], tabular: bool = False) -> SafetyBatch:
    if not transitions:
        raise ValueError("empty batch")
    if tabular:
        conv_s = lambda xs: np.array(xs, dtype=int)
        conv_a = conv_s
    else:
        conv_s = lambda xs: np.stack([np.asarray(x, dtype=float) for x in xs])
        conv_a = conv_s
    return SafetyBatch(
        states=conv_s([t.state for t in transitions]),
        actions=conv_a([t.action for t in transitions]),
        next_states=conv_s([t.next_state for t in transitions]),
        failed=np.array([t.failed for t in transitions], dtype=bool),
        reached_goal=np.array([t.reached_goal for t in transitions], dtype=bool),
    )


def jsafe_update(critic: SafetyCritic, batch: SafetyBatch, base_policy,
                 rng: RngStream) -> float:
    """One squared-error regression step of the critic toward its Bellman
    targets, followed by a polyak blend of the delayed target copy."""
    if len(batch.states) == 0:
        raise ValueError("empty batch")
    targets = safety_bellman_targets(critic, batch, base_policy, rng)
    x = critic.features(batch.states, batch.actions)
    q, cache = critic.net.forward_cached(x)
    diff = q[:, 0] - targets
    n = len(diff)
    grads, _ = critic.net.backward(cache, (2.0 * diff / n)[:, None])
    adam_step(critic.opt, critic.net.params, grads)
    critic.sync_target()
    return float(np.mean(diff ** 2))


def is_safe(critic: SafetyCritic, state, action, eps_safe: float) -> bool:
    """Strictly-below-threshold convention."""
    return critic.value_one(state, action) < eps_safe


MODE_PLAIN = "plain"
MODE_RISKY = "riskiest-safe"
MODE_SAFEST = "safest-among"


@dataclass
class MaskTally:
    """Audit counters accumulated by a masked sampler over its lifetime."""

    emitted: int = 0
    fallbacks: int = 0
    rejected: int = 0
    violations: int = 0  # non-fallback emissions at or above the threshold


class MaskedSamplingPolicy:
    """Base stochastic policy filtered through the safety critic.

    Every emitted action either scores strictly below ``eps_safe`` or is the
    lowest-scoring candidate when none qualify (fallback). Modes: ``plain``
    picks uniformly among safe candidates (renormalized base density in the
    sampling sense), ``riskiest-safe`` picks the safe candidate closest to the
    threshold from below, ``safest-among`` picks the lowest-scoring safe one.
    """

    def __init__(self, base_policy, critic: SafetyCritic, eps_safe: float,
                 n_candidates: int = 100, mode: str = MODE_PLAIN):
        if n_candidates < 1:
            raise ValueError("need at least one candidate")
        if mode not in (MODE_PLAIN, MODE_RISKY, MODE_SAFEST):
            raise ValueError(f"unknown exploration mode {mode!r}")
        self.base = base_policy
        self.critic = critic
        self.eps_safe = eps_safe
        self.n_candidates = n_candidates
        self.mode = mode
        self.tally = MaskTally()

    def _candidates(self, state, rng: RngStream):
        actions, _ = self.base.sample_many(np.asarray(state, dtype=float),
                                           self.n_candidates, rng)
        states = np.broadcast_to(np.asarray(state, dtype=float),
                                 (self.n_candidates, len(state)))
        qs = self.critic.value(states, actions)
        return actions, qs

    def _record(self, q_chosen: float, n_rejected: int, fallback: bool):
        self.tally.emitted += 1
        self.tally.rejected += n_rejected
        if fallback:
            self.tally.fallbacks += 1
        elif q_chosen >= self.eps_safe:
            self.tally.violations += 1

    def sample_masked(self, state, rng: RngStream):
        """Returns (action, n_rejected, fallback_used)."""
        actions, qs = self._candidates(state, rng)
        safe = np.flatnonzero(qs < self.eps_safe)
        if len(safe) == 0:
            i = int(np.argmin(qs))
            self._record(float(qs[i]), self.n_candidates, True)
            return actions[i], self.n_candidates, True
        if self.mode == MODE_RISKY:
            i = int(safe[np.argmax(qs[safe])])
        elif self.mode == MODE_SAFEST:
            i = int(safe[np.argmin(qs[safe])])
        else:
            i = int(safe[rng.integers(0, len(safe))])
        n_rejected = self.n_candidates - len(safe)
        self._record(float(qs[i]), n_rejected, False)
        return actions[i], n_rejected, False

    def sample_risky_safe(self, state, rng: RngStream):
        """Safe candidate with maximal risk score (boundary exploration);
        identical fallback behavior to sample_masked."""
        actions, qs = self._candidates(state, rng)
        safe = np.flatnonzero(qs < self.eps_safe)
        if len(safe) == 0:
            i = int(np.argmin(qs))
            self._record(float(qs[i]), self.n_candidates, True)
            return actions[i]
        i = int(safe[np.argmax(qs[safe])])
        self._record(float(qs[i]), self.n_candidates - len(safe), False)
        return actions[i]

    def act(self, state, rng: RngStream):
        if self.mode == MODE_RISKY:
            return self.sample_risky_safe(state, rng)
        action, _, _ = self.sample_masked(state, rng)
        return action
