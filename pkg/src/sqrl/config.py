"""Experiment configuration: one flat record covering environment selection,
phase sizes, actor-critic hyperparameters, safety hyperparameters, and output
location. Serializes to/from JSON for the CLI's --config flag."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

BASELINES = ("sqrl", "sac", "risk-sensitive")
ENVIRONMENTS = ("drunk-spider", "drunk-spider-grid")


@dataclass
class ExperimentConfig:
    # environment
    env: str = "drunk-spider"
    pretrain_action_noise: float = 0.1
    target_action_noise: float = 0.2
    action_scale: float = 1.0
    episode_length: int = 30
    grid_width: int = 12
    grid_height: int = 10
    p_slip: float = 0.1
    # seeds
    seeds: list[int] = field(default_factory=lambda: [0])
    # phase sizes (pre-training runs n_pre outer iterations of n_off env steps,
    # then k masked rollouts and a burst of safety-critic updates)
    n_pre: int = 200
    n_off: int = 250
    k_rollouts: int = 10
    n_safety_updates: int = 120
    n_target: int = 20_000
    # actor-critic
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 128
    target_entropy: float = -2.0
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    offline_buffer_capacity: int = 100_000
    safe_buffer_capacity: int = 20_000
    start_steps: int = 1_000
    initial_alpha: float = 0.2
    # safety critic and masking
    eps_safe: float = 0.1
    gamma_safe: float = 0.65
    n_candidates: int = 100
    safety_lr: float = 3e-4
    safety_tau: float = 0.01
    exploration_mode: str = "plain"  # masked-rollout candidate selection
    # fine-tuning
    online_safety_critic: bool = True
    baseline: str = "sqrl"
    dual_lr: float = 0.01
    # output
    out_dir: str = "runs"

    def validate(self) -> None:
        """Collect every inconsistency and raise before any stepping."""
        problems = []
        if self.env not in ENVIRONMENTS:
            problems.append(f"unknown env {self.env!r} (choose from {ENVIRONMENTS})")
        if self.baseline not in BASELINES:
            problems.append(f"unknown baseline {self.baseline!r} (choose from {BASELINES})")
        for name in ("n_pre", "n_off", "k_rollouts", "n_target", "n_safety_updates",
                     "episode_length", "batch_size", "n_candidates", "start_steps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.eps_safe < 1.0:
            problems.append(f"eps_safe must be in (0, 1), got {self.eps_safe}")
        if not 0.0 < self.gamma_safe < 1.0:
            problems.append(f"gamma_safe must be in (0, 1), got {self.gamma_safe}")
        if not 0.0 < self.gamma <= 1.0:
            problems.append(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must be in (0, 1], got {self.tau}")
        if self.batch_size > self.offline_buffer_capacity:
            problems.append("batch_size exceeds offline buffer capacity")
        if self.batch_size > self.safe_buffer_capacity:
            problems.append("batch_size exceeds safe buffer capacity")
        if not self.seeds:
            problems.append("at least one seed is required")
        if not 0.0 <= self.p_slip < 1.0:
            problems.append(f"p_slip must be in [0, 1), got {self.p_slip}")
        if self.exploration_mode not in ("plain", "riskiest-safe", "safest-among"):
            problems.append(f"unknown exploration_mode {self.exploration_mode!r}")
        if problems:
            raise ValueError("invalid config:\n  " + "\n  ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> ExperimentConfig:
        with open(path) as fh:
            cfg = cls.from_dict(json.load(fh))
        cfg.validate()
        return cfg

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
