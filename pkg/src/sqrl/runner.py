"""Experiment orchestration: the two-phase training loop (safety-tolerant
pre-training, then constrained fine-tuning on a shifted task), the plain and
risk-sensitive baselines, evaluation with path classification, metrics
emission, and checkpointing.

Pre-training alternates ``n_off`` unconstrained off-policy steps (actor-critic
updates every step once the buffer is warm) with ``k`` masked rollouts that
feed the small on-policy safety buffer, followed by a burst of safety-critic
updates. Fine-tuning samples every action through the mask, adds the
failure-probability penalty (weight nu) to the policy objective, and adapts nu
by projected dual ascent so it grows exactly while the constraint is violated.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .core import ReplayBuffer, RngStream, Trajectory, Transition, rollout
from .envs import BRIDGE_X, DrunkSpiderContinuous, in_bridge
from .nn import AdamState, mlp_from_dict, mlp_to_dict
from .sac import (SquashedGaussianPolicy, TemperatureState, TwinCritics,
                  critic_update, policy_update, polyak_update, stack_batch,
                  temperature_update)
from .safety import (MODE_PLAIN, MaskedSamplingPolicy, SafetyCritic, jsafe_update,
                     make_continuous_features, stack_safety_batch)

PHASE_PRETRAIN = "pretrain"
PHASE_PRETRAIN_ROLLOUT = "pretrain-rollout"
PHASE_FINETUNE = "finetune"
TRAILING_WINDOW = 100


@dataclass
class DualState:
    """Projected safety multiplier: nu >= 0 always; grows while the mean
    masked-policy failure estimate exceeds the threshold."""

    nu: float = 0.0
    lr: float = 0.01


def dual_update(dual: DualState, mean_qsafe: float, eps_safe: float) -> float:
    dual.nu = max(0.0, dual.nu + dual.lr * (mean_qsafe - eps_safe))
    return dual.nu


@dataclass
class MetricsRecord:
    phase: str
    episode: int
    global_step: int
    episode_return: float
    length: int
    failed: bool
    cumulative_failures: int
    failure_rate: float
    alpha: float
    nu: float
    mean_qsafe: float | None
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> MetricsRecord:
        return cls(**doc)


class PhaseLog:
    """Per-phase episode accounting with a trailing failure-rate window."""

    def __init__(self, phase: str, seed: int, window: int = TRAILING_WINDOW):
        self.phase = phase
        self.seed = seed
        self.episode = 0
        self.cumulative_failures = 0
        self.window = deque(maxlen=window)
        self.records: list[MetricsRecord] = []

    def log(self, global_step: int, episode_return: float, length: int, failed: bool,
            alpha: float, nu: float, mean_qsafe: float | None) -> MetricsRecord:
        self.episode += 1
        self.cumulative_failures += int(failed)
        self.window.append(bool(failed))
        rec = MetricsRecord(
            phase=self.phase, episode=self.episode, global_step=global_step,
            episode_return=round(float(episode_return), 10), length=length,
            failed=bool(failed), cumulative_failures=self.cumulative_failures,
            failure_rate=round(sum(self.window) / len(self.window), 10),
            alpha=round(float(alpha), 10), nu=round(float(nu), 10),
            mean_qsafe=None if mean_qsafe is None else round(float(mean_qsafe), 10),
            seed=self.seed,
        )
        self.records.append(rec)
        return rec


@dataclass
class Artifacts:
    policy: SquashedGaussianPolicy
    critics: TwinCritics
    temperature: TemperatureState
    safety_critic: SafetyCritic | None
    config: ExperimentConfig


@dataclass
class PhaseResult:
    records: list[MetricsRecord]
    audit: dict = field(default_factory=dict)


def make_task(config: ExperimentConfig, phase: str) -> DrunkSpiderContinuous:
    if config.env != "drunk-spider":
        raise ValueError(f"training loops support the continuous task only, got {config.env!r}")
    noise = config.pretrain_action_noise if phase == "pretrain" else config.target_action_noise
    return DrunkSpiderContinuous(action_noise=noise, action_scale=config.action_scale,
                                 horizon=config.episode_length, gamma=config.gamma)


STATE_LOC = 5.0  # arena center; inputs are normalized to roughly [-1, 1]
STATE_SCALE = 5.0


def _build_networks(config: ExperimentConfig, rng: RngStream, with_safety: bool):
    r_pol, r_cri, r_safe = rng.split(3)
    hidden = tuple(config.hidden)
    policy = SquashedGaussianPolicy(2, 2, hidden, config.action_scale, r_pol, lr=config.lr,
                                    state_loc=STATE_LOC, state_scale=STATE_SCALE)
    critics = TwinCritics(2, 2, hidden, r_cri, lr=config.lr, tau=config.tau,
                          state_loc=STATE_LOC, state_scale=STATE_SCALE)
    temperature = TemperatureState.create(config.target_entropy, config.initial_alpha,
                                          lr=config.lr)
    safety = None
    if with_safety:
        safety = SafetyCritic(4, hidden, config.gamma_safe, r_safe,
                              lr=config.safety_lr, tau=config.safety_tau,
                              features=make_continuous_features(STATE_LOC, STATE_SCALE))
        # Start optimistic so the young critic does not mask everything.
        safety.net.biases[-1][:] = -3.5
        safety.target.biases[-1][:] = -3.5
    return policy, critics, temperature, safety


def _episode_qsafe(safety: SafetyCritic | None, states: list, actions: list) -> float | None:
    if safety is None or not states:
        return None
    s = np.stack([np.asarray(x, dtype=float) for x in states])
    a = np.stack([np.asarray(x, dtype=float) for x in actions])
    return float(np.mean(safety.value(s, a)))


def pretrain(config: ExperimentConfig, seed: int):
    """Two-buffer pre-training; returns (Artifacts, PhaseResult). With the
    plain-actor baseline the safety critic and masked rollouts are skipped."""
    config.validate()
    train_safety = config.baseline != "sac"
    task = make_task(config, "pretrain")
    root = RngStream(seed)
    init_rng, env_rng, sac_rng, roll_rng, safe_rng = root.split(5)
    policy, critics, temperature, safety = _build_networks(config, init_rng, train_safety)

    d_off = ReplayBuffer(config.offline_buffer_capacity)
    d_safe = ReplayBuffer(config.safe_buffer_capacity)
    masked = None
    if train_safety:
        masked = MaskedSamplingPolicy(policy, safety, config.eps_safe,
                                      config.n_candidates, mode=config.exploration_mode)

    log_off = PhaseLog(PHASE_PRETRAIN, seed)
    log_roll = PhaseLog(PHASE_PRETRAIN_ROLLOUT, seed)
    state = task.initial_state(env_rng)
    ep_return, ep_len = 0.0, 0
    ep_states: list = []
    ep_actions: list = []
    gstep = 0

    for _ in range(config.n_pre):
        for _ in range(config.n_off):
            gstep += 1
            if gstep <= config.start_steps:
                action = sac_rng.uniform(-1.0, 1.0, size=2)
            else:
                action = policy.act(state, sac_rng)
            nxt, reward = task.step(state, action, env_rng)
            failed = task.is_failure(nxt)
            goal = not failed and task.is_goal(nxt)
            timed_out = (ep_len + 1 >= config.episode_length) and not failed and not goal
            tr = Transition(state, action, reward, nxt, failed=failed,
                            reached_goal=goal, timed_out=timed_out)
            d_off.push(tr)
            if train_safety:
                # The safety critic regresses toward the unconstrained policy's
                # risk (its Bellman targets already bootstrap from it), so the
                # behavior stream is in-distribution training data; the small
                # capacity keeps it recency-weighted.
                d_safe.push(tr)
            ep_return += reward
            ep_len += 1
            ep_states.append(state)
            ep_actions.append(action)

            if gstep > config.start_steps and len(d_off) >= config.batch_size:
                batch = stack_batch(d_off.sample(config.batch_size, sac_rng))
                critic_update(critics, policy, temperature, batch, config.gamma, sac_rng)
                _, logp, _ = policy_update(critics, policy, temperature,
                                           batch.states, sac_rng)
                temperature_update(temperature, logp)
                polyak_update(critics)

            if failed or goal or timed_out:
                log_off.log(gstep, ep_return, ep_len, failed, temperature.alpha, 0.0,
                            _episode_qsafe(safety, ep_states, ep_actions))
                state = task.initial_state(env_rng)
                ep_return, ep_len = 0.0, 0
                ep_states, ep_actions = [], []
            else:
                state = nxt

        if train_safety:
            for _ in range(config.k_rollouts):
                traj = rollout(masked, task, roll_rng)
                d_safe.extend(traj.transitions)
                # Masked rollouts are real experience; off-policy SAC reuses
                # them, which teaches the actor the diverted routes too.
                d_off.extend(traj.transitions)
                log_roll.log(gstep, traj.total_reward, len(traj), traj.failed,
                             temperature.alpha, 0.0,
                             _episode_qsafe(safety, [t.state for t in traj.transitions],
                                            [t.action for t in traj.transitions]))
            for _ in range(config.n_safety_updates):
                if len(d_safe) >= config.batch_size:
                    sbatch = stack_safety_batch(d_safe.sample(config.batch_size, safe_rng))
                    jsafe_update(safety, sbatch, policy, safe_rng)

    audit = asdict(masked.tally) if masked is not None else {}
    artifacts = Artifacts(policy, critics, temperature, safety, config)
    return artifacts, PhaseResult(records=log_off.records + log_roll.records, audit=audit)


def finetune(config: ExperimentConfig, artifacts: Artifacts, seed: int):
    """Constrained fine-tuning on the shifted task; returns (Artifacts,
    PhaseResult). Baselines: ``sac`` disables masking and all safety terms;
    ``risk-sensitive`` samples unmasked but pushes the scaled risk estimate
    into the critic targets."""
    config.validate()
    baseline = config.baseline
    policy, critics, temperature = artifacts.policy, artifacts.critics, artifacts.temperature
    safety = artifacts.safety_critic
    if baseline in ("sqrl", "risk-sensitive") and safety is None:
        raise ValueError(f"baseline {baseline!r} needs a pre-trained safety critic")

    task = make_task(config, "finetune")
    root = RngStream(seed)
    env_rng, sac_rng, mask_rng, safe_rng = root.split(4)
    d_off = ReplayBuffer(config.offline_buffer_capacity)
    d_safe = ReplayBuffer(config.safe_buffer_capacity)
    dual = DualState(lr=config.dual_lr)
    masked = None
    if baseline == "sqrl":
        masked = MaskedSamplingPolicy(policy, safety, config.eps_safe,
                                      config.n_candidates, mode=MODE_PLAIN)

    log = PhaseLog(PHASE_FINETUNE, seed)
    state = task.initial_state(env_rng)
    ep_return, ep_len = 0.0, 0
    ep_states: list = []
    ep_actions: list = []

    for step_i in range(1, config.n_target + 1):
        if masked is not None:
            action, _, _ = masked.sample_masked(state, mask_rng)
        else:
            action = policy.act(state, sac_rng)
        nxt, reward = task.step(state, action, env_rng)
        failed = task.is_failure(nxt)
        goal = not failed and task.is_goal(nxt)
        timed_out = (ep_len + 1 >= config.episode_length) and not failed and not goal
        tr = Transition(state, action, reward, nxt, failed=failed,
                        reached_goal=goal, timed_out=timed_out)
        d_off.push(tr)
        if config.online_safety_critic and safety is not None and baseline != "sac":
            d_safe.push(tr)
        ep_return += reward
        ep_len += 1
        ep_states.append(state)
        ep_actions.append(action)

        if len(d_off) >= config.batch_size:
            batch = stack_batch(d_off.sample(config.batch_size, sac_rng))
            risk_penalty = None
            qsafe_logged = None
            if baseline == "risk-sensitive":
                qsafe_logged = safety.value(batch.states, batch.actions)
                risk_penalty = dual.nu * qsafe_logged
            critic_update(critics, policy, temperature, batch, config.gamma, sac_rng,
                          risk_penalty=risk_penalty)
            if baseline == "sqrl":
                _, logp, mean_q = policy_update(critics, policy, temperature,
                                                batch.states, sac_rng,
                                                safety=safety, nu=dual.nu)
                dual_update(dual, mean_q, config.eps_safe)
            else:
                _, logp, _ = policy_update(critics, policy, temperature,
                                           batch.states, sac_rng)
                if baseline == "risk-sensitive":
                    dual_update(dual, float(np.mean(qsafe_logged)), config.eps_safe)
            temperature_update(temperature, logp)
            polyak_update(critics)
            if (config.online_safety_critic and safety is not None and baseline != "sac"
                    and len(d_safe) >= config.batch_size):
                sbatch = stack_safety_batch(d_safe.sample(config.batch_size, safe_rng))
                jsafe_update(safety, sbatch, policy, safe_rng)

        if failed or goal or timed_out:
            log.log(step_i, ep_return, ep_len, failed, temperature.alpha, dual.nu,
                    _episode_qsafe(safety, ep_states, ep_actions))
            state = task.initial_state(env_rng)
            ep_return, ep_len = 0.0, 0
            ep_states, ep_actions = [], []
        else:
            state = nxt

    audit = asdict(masked.tally) if masked is not None else {}
    if masked is not None and masked.tally.violations:
        raise AssertionError(
            f"masking audit failed: {masked.tally.violations} non-fallback actions "
            f"at or above the threshold")
    return artifacts, PhaseResult(records=log.records, audit=audit)


def run_experiment(config: ExperimentConfig, seed: int) -> dict:
    """Pre-train then fine-tune under one seed; returns artifacts plus the
    combined records and audit counters."""
    artifacts, pre = pretrain(config, seed)
    artifacts, fine = finetune(config, artifacts, seed)
    return {
        "artifacts": artifacts,
        "records": pre.records + fine.records,
        "audit": {"pretrain": pre.audit, "finetune": fine.audit},
    }


def run_baseline(config: ExperimentConfig, seed: int) -> dict:
    if config.baseline not in ("sac", "risk-sensitive"):
        raise ValueError(f"unknown baseline {config.baseline!r}; expected sac or risk-sensitive")
    return run_experiment(config, seed)


# ---------------------------------------------------------------------------
# Evaluation and path classification
# ---------------------------------------------------------------------------

def classify_path(trajectory: Trajectory) -> str:
    """bridge: any visited position inside the corridor between the pits;
    around: reached x beyond the pits without entering the corridor;
    neither: everything else."""
    positions = trajectory.states
    if any(in_bridge(p) for p in positions):
        return "bridge"
    if any(float(p[0]) > BRIDGE_X[1] for p in positions):
        return "around"
    return "neither"


def evaluate(config: ExperimentConfig, artifacts: Artifacts, seed: int,
             eps_safe: float | None = None, n_episodes: int = 100,
             action_noise: float | None = None, use_mask: bool = True):
    """Frozen-policy rollouts on the target task; returns (rows, summary)."""
    noise = config.target_action_noise if action_noise is None else action_noise
    task = DrunkSpiderContinuous(action_noise=noise, action_scale=config.action_scale,
                                 horizon=config.episode_length, gamma=config.gamma)
    rng = RngStream(seed)
    eps = config.eps_safe if eps_safe is None else eps_safe
    if use_mask and artifacts.safety_critic is not None:
        sampler = MaskedSamplingPolicy(artifacts.policy, artifacts.safety_critic,
                                       eps, config.n_candidates, mode=MODE_PLAIN)
    else:
        sampler = artifacts.policy
    rows = []
    counts = {"bridge": 0, "around": 0, "neither": 0}
    failures = 0
    for ep in range(n_episodes):
        traj = rollout(sampler, task, rng)
        path = classify_path(traj)
        counts[path] += 1
        failures += int(traj.failed)
        rows.append({
            "episode": ep,
            "length": len(traj),
            "episode_return": round(traj.total_reward, 10),
            "failed": traj.failed,
            "path": path,
        })
    summary = {
        "episodes": n_episodes,
        "eps_safe": eps,
        "action_noise": noise,
        "failure_rate": failures / n_episodes,
        "bridge_fraction": counts["bridge"] / n_episodes,
        "around_fraction": counts["around"] / n_episodes,
        "neither_fraction": counts["neither"] / n_episodes,
    }
    if isinstance(sampler, MaskedSamplingPolicy):
        summary["fallback_fraction"] = (sampler.tally.fallbacks / sampler.tally.emitted
                                        if sampler.tally.emitted else 0.0)
        summary["violations"] = sampler.tally.violations
    return rows, summary


# ---------------------------------------------------------------------------
# Metrics files and checkpoints
# ---------------------------------------------------------------------------

def emit_metrics(records: list[MetricsRecord], path: str | Path,
                 config: ExperimentConfig | None = None, seed: int | None = None,
                 extra: dict | None = None) -> Path:
    """One JSON object per line plus a sibling ``.manifest.json``. Re-checks
    the cumulative-failure monotonicity invariant at write time."""
    path = Path(path)
    last_by_phase: dict[str, int] = {}
    for rec in records:
        prev = last_by_phase.get(rec.phase, 0)
        if rec.cumulative_failures < prev:
            raise ValueError(
                f"cumulative failures decreased within phase {rec.phase!r}: "
                f"{prev} -> {rec.cumulative_failures}")
        last_by_phase[rec.phase] = rec.cumulative_failures
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
        manifest = {
            "code_version": __version__,
            "seed": seed,
            "config_hash": config.config_hash() if config else None,
            "config": config.to_dict() if config else None,
            "n_records": len(records),
        }
        if extra:
            manifest.update(extra)
        mpath = path.with_suffix(".manifest.json")
        with open(mpath, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed writing metrics to {path}: {exc}") from exc
    return path


def load_metrics(path: str | Path) -> list[MetricsRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(MetricsRecord.from_dict(json.loads(line)))
    return records


def merge_metrics(paths: list[str | Path], out_path: str | Path) -> Path:
    """Concatenate per-seed metrics files in the given order."""
    merged: list[MetricsRecord] = []
    for p in paths:
        merged.extend(load_metrics(p))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for rec in merged:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    manifest = {
        "code_version": __version__,
        "sources": [str(p) for p in paths],
        "n_records": len(merged),
    }
    with open(out_path.with_suffix(".manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_path


CHECKPOINT_FORMAT = 1


def save_checkpoint(artifacts: Artifacts, path: str | Path) -> Path:
    """Single-file JSON checkpoint: a manifest of roles, each serialized in
    the flat layer-size-header network format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    roles = {
        "policy": mlp_to_dict(artifacts.policy.net),
        "critic1": mlp_to_dict(artifacts.critics.q1),
        "critic2": mlp_to_dict(artifacts.critics.q2),
        "critic1_target": mlp_to_dict(artifacts.critics.t1),
        "critic2_target": mlp_to_dict(artifacts.critics.t2),
    }
    if artifacts.safety_critic is not None:
        roles["safety"] = mlp_to_dict(artifacts.safety_critic.net)
        roles["safety_target"] = mlp_to_dict(artifacts.safety_critic.target)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "roles": roles,
        "log_alpha": float(artifacts.temperature.log_alpha[0]),
        "target_entropy": artifacts.temperature.target_entropy,
        "config": artifacts.config.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def load_checkpoint(path: str | Path) -> Artifacts:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    config = ExperimentConfig.from_dict(doc["config"])
    rng = RngStream(0)  # reinitialized nets are overwritten below
    policy, critics, temperature, safety = _build_networks(
        config, rng, with_safety="safety" in doc["roles"])
    roles = doc["roles"]
    policy.net = mlp_from_dict(roles["policy"])
    policy.opt = AdamState.for_params(policy.net.params, lr=config.lr)
    critics.q1 = mlp_from_dict(roles["critic1"])
    critics.q2 = mlp_from_dict(roles["critic2"])
    critics.t1 = mlp_from_dict(roles["critic1_target"])
    critics.t2 = mlp_from_dict(roles["critic2_target"])
    critics.opt1 = AdamState.for_params(critics.q1.params, lr=config.lr)
    critics.opt2 = AdamState.for_params(critics.q2.params, lr=config.lr)
    temperature.log_alpha[0] = doc["log_alpha"]
    temperature.target_entropy = doc["target_entropy"]
    if safety is not None:
        safety.net = mlp_from_dict(roles["safety"])
        safety.target = mlp_from_dict(roles["safety_target"])
        safety.opt = AdamState.for_params(safety.net.params, lr=config.safety_lr)
    return Artifacts(policy, critics, temperature, safety, config)
