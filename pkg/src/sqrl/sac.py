"""Entropy-regularized actor-critic for continuous actions: a squashed
Gaussian policy, twin Q-networks with delayed targets, and automatic
temperature tuning against a target entropy.

Gradients are computed analytically through the reparameterized sample
a = scale * tanh(mean + std * xi); the log-density includes the tanh
change-of-variables correction in the numerically stable form
log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, Transition
from .nn import AdamState, Mlp, adam_step, polyak_blend

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray  # failed or reached_goal: no bootstrap (timeouts bootstrap)

    def __len__(self) -> int:
        return len(self.states)


def stack_batch(transitions: list[Transition]) -> Batch:
    if not transitions:
        raise ValueError("empty batch")
    return Batch(
        states=np.stack([np.asarray(t.state, dtype=float) for t in transitions]),
        actions=np.stack([np.asarray(t.action, dtype=float) for t in transitions]),
        rewards=np.array([t.reward for t in transitions]),
        next_states=np.stack([np.asarray(t.next_state, dtype=float) for t in transitions]),
        terminal=np.array([t.failed or t.reached_goal for t in transitions], dtype=float),
    )


class SquashedGaussianPolicy:
    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...],
                 action_scale: float, rng: RngStream, lr: float = 3e-4,
                 state_loc: float = 0.0, state_scale: float = 1.0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_scale = float(action_scale)
        self.state_loc = float(state_loc)
        self.state_scale = float(state_scale)
        self.net = Mlp([state_dim, *hidden, 2 * action_dim], "identity", rng)
        self.opt = AdamState.for_params(self.net.params, lr=lr)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self.state_loc) / self.state_scale

    def _dist_params(self, states: np.ndarray):
        out = self.net.forward(self.normalize(states))
        mean = out[..., : self.action_dim]
        log_std = np.clip(out[..., self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def _finish(self, mean, std, xi):
        u = mean + std * xi
        tanh_u = np.tanh(u)
        action = self.action_scale * tanh_u
        logp = (-np.log(std) - 0.5 * xi ** 2 - _HALF_LOG_2PI
                - np.log(self.action_scale) - _log1m_tanh_sq(u)).sum(axis=-1)
        return action, logp

    def sample(self, states: np.ndarray, rng: RngStream):
        """Reparameterized draw; returns (actions, log_probs)."""
        mean, log_std = self._dist_params(np.asarray(states, dtype=float))
        xi = rng.standard_normal(mean.shape)
        return self._finish(mean, np.exp(log_std), xi)

    def sample_many(self, state: np.ndarray, n: int, rng: RngStream):
        """n draws for one state (one network evaluation)."""
        mean, log_std = self._dist_params(np.asarray(state, dtype=float)[None, :])
        xi = rng.standard_normal((n, self.action_dim))
        return self._finish(mean, np.exp(log_std), xi)

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Density of given actions (inverts the squashing; finite everywhere
        inside the open action box)."""
        mean, log_std = self._dist_params(np.asarray(states, dtype=float))
        std = np.exp(log_std)
        ratio = np.clip(np.asarray(actions, dtype=float) / self.action_scale,
                        -1.0 + 1e-12, 1.0 - 1e-12)
        u = np.arctanh(ratio)
        xi = (u - mean) / std
        return (-np.log(std) - 0.5 * xi ** 2 - _HALF_LOG_2PI
                - np.log(self.action_scale) - _log1m_tanh_sq(u)).sum(axis=-1)

    def mean_action(self, state: np.ndarray) -> np.ndarray:
        mean, _ = self._dist_params(np.asarray(state, dtype=float))
        return self.action_scale * np.tanh(mean)

    def act(self, state, rng: RngStream) -> np.ndarray:
        action, _ = self.sample(np.asarray(state, dtype=float)[None, :], rng)
        return action[0]


class TwinCritics:
    """Two Q-networks with delayed target copies blended by polyak averaging."""

    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...],
                 rng: RngStream, lr: float = 3e-4, tau: float = 0.005,
                 state_loc: float = 0.0, state_scale: float = 1.0):
        sizes = [state_dim + action_dim, *hidden, 1]
        self.q1 = Mlp(sizes, "identity", rng)
        self.q2 = Mlp(sizes, "identity", rng)
        self.t1 = self.q1.clone()
        self.t2 = self.q2.clone()
        self.opt1 = AdamState.for_params(self.q1.params, lr=lr)
        self.opt2 = AdamState.for_params(self.q2.params, lr=lr)
        self.tau = tau
        self.state_loc = float(state_loc)
        self.state_scale = float(state_scale)

    def _join(self, states, actions):
        return np.concatenate([(states - self.state_loc) / self.state_scale, actions],
                              axis=-1)

    def q_values(self, states, actions):
        sa = self._join(states, actions)
        return self.q1.forward(sa)[:, 0], self.q2.forward(sa)[:, 0]

    def target_min(self, states, actions):
        sa = self._join(states, actions)
        return np.minimum(self.t1.forward(sa)[:, 0], self.t2.forward(sa)[:, 0])


@dataclass
class TemperatureState:
    """Entropy temperature alpha = exp(log_alpha) (positive by construction)
    with the target entropy it is tuned against."""

    log_alpha: np.ndarray
    target_entropy: float
    opt: AdamState

    @classmethod
    def create(cls, target_entropy: float, initial_alpha: float = 0.2,
               lr: float = 3e-4) -> TemperatureState:
        log_alpha = np.array([np.log(initial_alpha)])
        return cls(log_alpha=log_alpha, target_entropy=target_entropy,
                   opt=AdamState.for_params([log_alpha], lr=lr))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))


def critic_update(critics: TwinCritics, policy: SquashedGaussianPolicy,
                  temperature: TemperatureState, batch: Batch, gamma: float,
                  rng: RngStream, risk_penalty: np.ndarray | None = None) -> float:
    """Regress both critics to the soft Bellman target built from the delayed
    target networks and a fresh next action. ``risk_penalty`` (per-sample,
    already scaled) is subtracted from the target when given."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    a2, logp2 = policy.sample(batch.next_states, rng)
    q_next = critics.target_min(batch.next_states, a2)
    y = batch.rewards + gamma * (1.0 - batch.terminal) * (q_next - temperature.alpha * logp2)
    if risk_penalty is not None:
        y = y - risk_penalty
    sa = critics._join(batch.states, batch.actions)
    n = len(batch)
    losses = []
    for net, opt in ((critics.q1, critics.opt1), (critics.q2, critics.opt2)):
        q, cache = net.forward_cached(sa)
        diff = q[:, 0] - y
        losses.append(float(np.mean(diff ** 2)))
        grads, _ = net.backward(cache, (2.0 * diff / n)[:, None])
        adam_step(opt, net.params, grads)
    return 0.5 * (losses[0] + losses[1])


def policy_objective_grads(policy: SquashedGaussianPolicy, critics: TwinCritics,
                           alpha: float, states: np.ndarray, xi: np.ndarray,
                           safety=None, nu: float = 0.0):
    """Loss mean(alpha * log pi(a|s) - min Q(s, a) [+ nu * Qsafe(s, a)]) with a
    reparameterized through fixed noise ``xi``; critic parameters stay frozen.

    Returns (loss, policy_param_grads, logp, actions, mean safety value).
    """
    out, cache = policy.net.forward_cached(policy.normalize(states))
    d = policy.action_dim
    mean = out[:, :d]
    raw = out[:, d:]
    gate = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * xi
    tanh_u = np.tanh(u)
    actions = policy.action_scale * tanh_u
    logp = (-log_std - 0.5 * xi ** 2 - _HALF_LOG_2PI
            - np.log(policy.action_scale) - _log1m_tanh_sq(u)).sum(axis=1)

    n = len(states)
    sa = critics._join(states, actions)
    q1, c1 = critics.q1.forward_cached(sa)
    q2, c2 = critics.q2.forward_cached(sa)
    q1, q2 = q1[:, 0], q2[:, 0]
    pick1 = q1 <= q2
    qmin = np.where(pick1, q1, q2)
    loss = float(np.mean(alpha * logp - qmin))

    # d(loss)/d(action) through the frozen critics (only the argmin branch).
    _, gin1 = critics.q1.backward(c1, (-pick1.astype(float) / n)[:, None])
    _, gin2 = critics.q2.backward(c2, (-(~pick1).astype(float) / n)[:, None])
    g_action = gin1[:, policy.state_dim:] + gin2[:, policy.state_dim:]

    qsafe_mean = 0.0
    if safety is not None and nu != 0.0:
        qs, cs = safety.net.forward_cached(safety.features(states, actions))
        qsafe_mean = float(np.mean(qs[:, 0]))
        loss += nu * qsafe_mean
        _, gins = safety.net.backward(cs, np.full((n, 1), nu / n))
        g_action = g_action + gins[:, policy.state_dim:]
    elif safety is not None:
        qs = safety.value(states, actions)
        qsafe_mean = float(np.mean(qs))

    # Chain into the distribution parameters. dlogp/du = 2 tanh(u);
    # dlogp/dlog_std = -1 (direct) + dlogp/du * std * xi (through u).
    g_u = (alpha / n) * (2.0 * tanh_u) + g_action * policy.action_scale * (1.0 - tanh_u ** 2)
    g_mean = g_u
    g_log_std = (g_u * std * xi - alpha / n) * gate
    upstream = np.concatenate([g_mean, g_log_std], axis=1)
    grads, _ = policy.net.backward(cache, upstream)
    return loss, grads, logp, actions, qsafe_mean


def policy_update(critics: TwinCritics, policy: SquashedGaussianPolicy,
                  temperature: TemperatureState, states: np.ndarray,
                  rng: RngStream, safety=None, nu: float = 0.0):
    """One policy gradient step; returns (loss, logp, mean safety value of the
    fresh actions) for downstream temperature / multiplier updates."""
    if len(states) == 0:
        raise ValueError("empty batch")
    xi = rng.standard_normal((len(states), policy.action_dim))
    loss, grads, logp, _, qsafe_mean = policy_objective_grads(
        policy, critics, temperature.alpha, states, xi, safety=safety, nu=nu)
    adam_step(policy.opt, policy.net.params, grads)
    return loss, logp, qsafe_mean


def temperature_update(temperature: TemperatureState, log_probs: np.ndarray) -> float:
    """Descend mean(-alpha * (log pi + target_entropy)) in log alpha."""
    grad = -temperature.alpha * float(np.mean(log_probs + temperature.target_entropy))
    adam_step(temperature.opt, [temperature.log_alpha], [np.array([grad])])
    return temperature.alpha


def polyak_update(critics: TwinCritics, tau: float | None = None) -> None:
    t = critics.tau if tau is None else tau
    polyak_blend(critics.q1.params, critics.t1.params, t)
    polyak_blend(critics.q2.params, critics.t2.params, t)
