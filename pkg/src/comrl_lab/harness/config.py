"""Experiment configuration: one flat JSON document, validated before any compute."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .. import envgen
from ..offlinerl import BRACConfig, TrainConfig
from ..replearn import SELECTORS, EncoderConfig, LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    family: str = "PointDir"
    n_train_tasks: int = 20
    n_test_tasks: int = 8
    loss: str = "UNICORN-SS"
    seeds: list = field(default_factory=lambda: [0])
    data_seed: int = 0
    training_steps: int = 20000
    eval_interval: int = 5000
    tiers: list = field(default_factory=lambda: list(envgen.TIERS))
    episodes_per_tier: int = 5
    horizon: int = 50
    context_training_size: int = 50
    eval_contexts_per_task: int = 1
    # representation
    task_representation_dimension: int = 5
    weight_alpha_ratio: float = 0.15          # alpha / (1 - alpha)
    encoder_head: str = "deterministic"
    encoder_width: int = 64
    focal_beta: float = 1.0
    focal_exponent: float = 2.0
    focal_eps: float = 0.1
    csro_lambda: float = 1.0
    corro_tau: float = 0.1
    corro_negatives: int = 4
    corro_anchors: int = 8
    kl_weight: float = 0.0
    contexts_per_task: int = 2
    # optimisation and RL
    task_batch_size: int = 16
    rl_batch_size: int = 256
    learning_rate: float = 3e-4
    rl_network_width: int = 64
    rl_network_depth: int = 2
    bc_alpha: float = 2.5
    bc_weight: float | None = None
    gamma: float = 0.99
    soft_update: float = 0.005
    # task-OOD model-based protocol
    taskood_train_window: list = field(default_factory=lambda: [0.25, 0.75])
    taskood_noise_scale: float = 0.1
    taskood_ensemble: int = 5
    taskood_rollout_length: int = 5
    taskood_imaginary_fraction: float = 0.5
    taskood_warmup: int = 2000
    taskood_uncertainty_penalty: float = 0.0
    taskood_data_actions: bool = False
    # sweeps
    alpha_grid: list = field(default_factory=lambda: [0.0, 0.15, 1.5, "FOCAL"])

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ validation
    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.family in envgen.FAMILIES, f"unknown family {self.family!r}")
        need(self.loss in SELECTORS, f"unknown loss selector {self.loss!r}; choose from {SELECTORS}")
        need(self.n_train_tasks >= 2, "n_train_tasks must be >= 2")
        need(self.n_test_tasks >= 1, "n_test_tasks must be >= 1")
        if self.family == "GridGoal":
            need(self.n_train_tasks + self.n_test_tasks <= envgen.GRID * envgen.GRID - 1,
                 "GridGoal has 24 goal cells; train and test tasks must fit disjointly")
        need(isinstance(self.seeds, list) and self.seeds and all(isinstance(s, int) for s in self.seeds),
             "seeds must be a non-empty list of integers")
        need(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        need(self.training_steps >= 1, "training_steps must be >= 1")
        need(self.eval_interval >= 1, "eval_interval must be >= 1")
        need(self.tiers and all(t in envgen.TIERS for t in self.tiers), f"tiers must be drawn from {envgen.TIERS}")
        need(self.episodes_per_tier >= 1, "episodes_per_tier must be >= 1")
        need(1 <= self.context_training_size <= self.horizon, "context_training_size must lie in 1..horizon")
        need(self.eval_contexts_per_task >= 1, "eval_contexts_per_task must be >= 1")
        need(self.weight_alpha_ratio >= 0, "weight_alpha_ratio must be >= 0")
        need(self.contexts_per_task >= 1, "contexts_per_task must be >= 1")
        need(self.task_batch_size >= 1 and self.rl_batch_size >= self.task_batch_size,
             "need task_batch_size >= 1 and rl_batch_size >= task_batch_size")
        need(self.learning_rate > 0, "learning_rate must be positive")
        lo, hi = (self.taskood_train_window + [None, None])[:2]
        need(len(self.taskood_train_window) == 2 and 0 <= lo < hi <= 1,
             "taskood_train_window must be [lo, hi] with 0 <= lo < hi <= 1")
        need(self.taskood_ensemble >= 2, "taskood_ensemble must be >= 2 (ensemble required)")
        need(self.taskood_noise_scale >= 0, "taskood_noise_scale must be >= 0")
        need(self.taskood_rollout_length >= 1, "taskood_rollout_length must be >= 1")
        need(self.taskood_uncertainty_penalty >= 0, "taskood_uncertainty_penalty must be >= 0")
        need(0 <= self.taskood_imaginary_fraction < 1, "taskood_imaginary_fraction must lie in [0, 1)")
        for a in self.alpha_grid:
            need(a == "FOCAL" or (isinstance(a, (int, float)) and a >= 0),
                 "alpha_grid entries are ratios alpha/(1-alpha) >= 0 or the string 'FOCAL'")
        need(self.loss != "CORRO" or self.corro_negatives <= self.n_train_tasks - 1,
             "CORRO needs corro_negatives <= n_train_tasks - 1")
        need(self.loss not in ("FOCAL", "CSRO", "UNICORN-SS") or self.contexts_per_task >= 2
             or self.loss == "UNICORN-SS" and self.weight_alpha_ratio == 0,
             "metric losses need contexts_per_task >= 2 for same-task pairs")
        try:
            self.loss_weights()
            self.encoder_config()
            self.brac_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        need(self.kl_weight == 0 or self.encoder_head == "gaussian", "kl_weight > 0 requires encoder_head 'gaussian'")

    # ------------------------------------------------------------ views
    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=LossWeights.alpha_from_ratio(self.weight_alpha_ratio), focal_beta=self.focal_beta,
                           focal_exponent=self.focal_exponent, focal_eps=self.focal_eps,
                           csro_lambda=self.csro_lambda, tau=self.corro_tau, kl_weight=self.kl_weight)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(embed_widths=(self.encoder_width,), latent_dim=self.task_representation_dimension,
                             head=self.encoder_head)

    def brac_config(self) -> BRACConfig:
        return BRACConfig(bc_weight=self.bc_weight, bc_alpha=self.bc_alpha, gamma=self.gamma,
                          tau=self.soft_update, batch_size=self.rl_batch_size)

    def train_config(self, seed) -> TrainConfig:
        return TrainConfig(steps=self.training_steps, task_batch=self.task_batch_size,
                           contexts_per_task=self.contexts_per_task, context_len=self.context_training_size,
                           lr_encoder=self.learning_rate, lr_head=self.learning_rate, lr_actor=self.learning_rate,
                           lr_critic=self.learning_rate, encoder_width=self.encoder_width,
                           rl_width=self.rl_network_width, rl_depth=self.rl_network_depth,
                           corro_negatives=self.corro_negatives, corro_anchors=self.corro_anchors, seed=seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**asdict(self), **changes})

    # ------------------------------------------------------------ io
    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)
