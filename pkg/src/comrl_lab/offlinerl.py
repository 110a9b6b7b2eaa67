"""Behavior-regularized actor-critic over (s, z) and the meta-train / meta-test loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import envgen
from .datastore import OfflineDataset, sample_contexts, sample_rl_batches
from .diffcore import MLP, Adam, Tensor
from .replearn import EncoderConfig, LossWeights, RepresentationModel, club_fit_loss

log = logging.getLogger(__name__)


class DetachViolation(AssertionError):
    """Actor/critic gradients reached the context encoder."""


class NumericalAbort(RuntimeError):
    def __init__(self, step, name, value):
        super().__init__(f"non-finite {name} ({value!r}) at step {step}")
        self.step, self.name = step, name


@dataclass
class BRACConfig:
    bc_weight: float | None = None      # fixed lambda_bc; None -> mean|Q| / bc_alpha
    bc_alpha: float = 2.5
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256

    def __post_init__(self):
        if self.bc_weight is not None and self.bc_weight < 0:
            raise ValueError("bc_weight must be >= 0")
        if not 0 < self.tau <= 1:
            raise ValueError("soft-update rate must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class TrainConfig:
    steps: int = 20000
    task_batch: int = 16
    contexts_per_task: int = 2
    context_len: int = 50
    lr_encoder: float = 3e-4
    lr_head: float = 3e-4
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    encoder_width: int = 64
    rl_width: int = 64
    rl_depth: int = 2
    corro_negatives: int = 4
    corro_anchors: int = 8
    seed: int = 0


class Agent:
    """Deterministic tanh actor pi(s, z) and critic Q(s, a, z) with a trailing target critic."""

    def __init__(self, state_dim, action_dim, latent_dim, width=64, depth=2, seed=0):
        hidden = [width] * depth
        self.state_dim, self.action_dim, self.latent_dim = state_dim, action_dim, latent_dim
        self.actor = MLP([state_dim + latent_dim, *hidden, action_dim], "relu", seed=seed + 101, name="actor")
        self.critic = MLP([state_dim + action_dim + latent_dim, *hidden, 1], "relu", seed=seed + 103,
                          name="critic")
        self.critic_target = MLP(self.critic.widths, "relu", seed=seed + 103, name="critic_target")
        self.critic_target.copy_from(self.critic)

    def policy(self, s: Tensor, z: Tensor) -> Tensor:
        return dc.tanh(self.actor(dc.concat([s, z], axis=1)))

    def q(self, s: Tensor, a: Tensor, z: Tensor, frozen=False) -> Tensor:
        out = self.critic(dc.concat([s, a, z], axis=1), frozen=frozen)
        return dc.reshape(out, (out.shape[0],))

    def act_np(self, s, z):
        return np.tanh(self.actor.forward_np(np.concatenate([s, z], axis=1)))

    def q_np(self, s, a, z, target=False):
        net = self.critic_target if target else self.critic
        return net.forward_np(np.concatenate([s, a, z], axis=1))[:, 0]

    def soft_update(self, tau):
        for p, q in zip(self.critic_target.parameters(), self.critic.parameters()):
            p.data += tau * (q.data - p.data)


def _as_detached(z):
    if isinstance(z, Tensor):
        if z.requires_grad:
            raise DetachViolation("task embedding passed to the RL losses still carries a gradient path")
        return z.data
    return np.asarray(z, dtype=np.float64)


def critic_loss(agent: Agent, batch: dict, z, cfg: BRACConfig) -> Tensor:
    """Mean squared Bellman residual against the target critic at (s', pi(s', z))."""
    z = _as_detached(z)
    s2 = batch["next_obs"]
    a2 = agent.act_np(s2, z)
    target = batch["rew"] + cfg.gamma * (1.0 - batch["done"]) * agent.q_np(s2, a2, z, target=True)
    q = agent.q(dc.constant(batch["obs"]), dc.constant(batch["act"]), dc.constant(z))
    return dc.mean(dc.square(dc.sub(q, dc.constant(target))))


def actor_loss(agent: Agent, batch: dict, z, cfg: BRACConfig) -> Tensor:
    """mean[-Q(s, pi(s,z), z) + lambda_bc * ||pi(s,z) - a_data||^2].

    With ``bc_weight`` unset, lambda_bc = mean|Q(s, pi(s,z), z)| / bc_alpha (a constant in the graph).
    """
    z = _as_detached(z)
    s, zt = dc.constant(batch["obs"]), dc.constant(z)
    pi = agent.policy(s, zt)
    # the actor step never touches critic weights, so skip their gradients
    q = agent.q(s, pi, zt, frozen=True)
    if cfg.bc_weight is None:
        lam = float(np.mean(np.abs(q.data))) / cfg.bc_alpha
    else:
        lam = cfg.bc_weight
    bc = dc.sq_dist(pi, dc.constant(batch["act"]))
    return dc.mean(dc.sub(dc.scale(bc, lam), q))


# ---------------------------------------------------------------- meta learner

class MetaLearner:
    """All trainable state of one run: encoder phi, head theta, actor omega, critic psi."""

    def __init__(self, selector, dataset: OfflineDataset, cfg: TrainConfig,
                 weights: LossWeights | None = None, enc_cfg: EncoderConfig | None = None,
                 brac: BRACConfig | None = None):
        self.cfg = cfg
        self.brac = brac or BRACConfig()
        self.family = dataset.family
        self.train_tasks = list(dataset.tasks)
        self.task_params = envgen.param_matrix(self.train_tasks)
        self.state_dim, self.action_dim = dataset.state_dim, dataset.action_dim
        enc_cfg = enc_cfg or EncoderConfig(embed_widths=(cfg.encoder_width,))
        self.rep = RepresentationModel(selector, dataset.feature_dim, dataset.state_dim, dataset.action_dim,
                                       len(self.train_tasks), enc_cfg, weights, hidden=cfg.encoder_width,
                                       seed=cfg.seed)
        self.agent = Agent(dataset.state_dim, dataset.action_dim, enc_cfg.latent_dim, cfg.rl_width,
                           cfg.rl_depth, seed=cfg.seed)
        self.opt_encoder = Adam(self.rep.encoder.parameters(), cfg.lr_encoder)
        self.opt_head = Adam(self.rep.head_parameters(), cfg.lr_head)
        self.opt_club = Adam(self.rep.club.parameters(), cfg.lr_head) if self.rep.club else None
        self.opt_actor = Adam(self.agent.actor.parameters(), cfg.lr_actor)
        self.opt_critic = Adam(self.agent.critic.parameters(), cfg.lr_critic)
        self._encoder_ids = {id(p) for p in self.rep.encoder.parameters()}
        self.rl_encoder_grad_norm = 0.0
        self.step_count = 0
        # optional (learner, contexts, z, batch, z_rows, rng) -> (batch, z_rows) used to mix extra data in
        self.rl_hook = None

    @property
    def selector(self):
        return self.rep.selector

    @property
    def latent_dim(self):
        return self.rep.enc_cfg.latent_dim

    def encode(self, feats) -> np.ndarray:
        return self.rep.encoder.encode_np(feats)

    def networks(self) -> dict:
        nets = dict(self.rep.networks())
        nets.update(actor=self.agent.actor, critic=self.agent.critic, critic_target=self.agent.critic_target)
        return nets

    def state_dict(self) -> dict:
        out = {}
        for net in self.networks().values():
            out.update(net.state_dict())
        return out

    def load_state_dict(self, state):
        for net in self.networks().values():
            net.load_state_dict(state)

    def _check(self, name, value):
        if not np.isfinite(value):
            raise NumericalAbort(self.step_count, name, value)

    def _assert_detached(self, leaves):
        hit = [p for p in leaves if id(p) in self._encoder_ids]
        if hit:
            self.rl_encoder_grad_norm += sum(float(np.abs(leaves[p]).sum()) for p in hit)
            raise DetachViolation(f"RL loss produced gradients for encoder tensors {[p.name for p in hit]}")

    def train_step(self, ds: OfflineDataset, rng: np.random.Generator) -> dict:
        """One iteration of the meta-training loop (representation, then actor-critic)."""
        cfg = self.cfg
        n_tasks = len(self.train_tasks)
        labels = rng.choice(n_tasks, size=cfg.task_batch, replace=n_tasks < cfg.task_batch)
        task_ids = [self.train_tasks[i].task_id for i in labels]
        # contexts: contexts_per_task per sampled task, slot-major
        rep_ids = np.tile(task_ids, cfg.contexts_per_task)
        rep_labels = np.tile(labels, cfg.contexts_per_task)
        ctx = sample_contexts(ds, rep_ids, cfg.context_len, rng)

        loss, z, parts = self.rep.loss(ctx.features, rep_labels, self.task_params, self.family, rng,
                                       cfg.corro_anchors, cfg.corro_negatives)
        self._check("representation loss", loss.item())
        grads = dc.backward(loss)
        self.opt_encoder.step(grads)
        self.opt_head.step(grads)
        if self.rep.club is not None:
            b = ctx.features.shape[0]
            pick = rng.integers(0, cfg.context_len, size=b)
            xb = ctx.features[np.arange(b), pick, :self.state_dim + self.action_dim]
            fit = club_fit_loss(self.rep.club, z.data, xb)
            self.opt_club.step(dc.backward(fit))
            parts["club_fit"] = fit.item()

        # detach: the RL losses only ever see a copy of the first context's latent per task
        z_task = z.data[:cfg.task_batch].copy()
        per_task = max(1, self.brac.batch_size // cfg.task_batch)
        batch = sample_rl_batches(ds, task_ids, per_task, rng)
        z_rows = z_task[batch["slot"]]
        if self.rl_hook is not None:
            batch, z_rows = self.rl_hook(self, ctx, z.data.copy(), batch, z_rows, rng)

        c_loss = critic_loss(self.agent, batch, z_rows, self.brac)
        self._check("critic loss", c_loss.item())
        leaves = dc.backward(c_loss)
        self._assert_detached(leaves)
        self.opt_critic.step(leaves)

        a_loss = actor_loss(self.agent, batch, z_rows, self.brac)
        self._check("actor loss", a_loss.item())
        leaves = dc.backward(a_loss)
        self._assert_detached(leaves)
        self.opt_actor.step(leaves)
        self.agent.soft_update(self.brac.tau)
        self.step_count += 1
        parts.update(critic_loss=c_loss.item(), actor_loss=a_loss.item())
        return parts


def meta_train(learner: MetaLearner, dataset: OfflineDataset, steps=None, rng=None,
               eval_every=0, evaluator=None) -> list:
    """Run the meta-training loop; returns metric rows (one per evaluation point).

    ``evaluator(learner, step)`` returns a dict merged into the row.
    """
    steps = learner.cfg.steps if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng(learner.cfg.seed)
    rows = []
    running = {}
    for t in range(1, steps + 1):
        parts = learner.train_step(dataset, rng)
        for k, v in parts.items():
            running[k] = running.get(k, 0.0) + v
        if eval_every and (t % eval_every == 0 or t == steps) and (not rows or rows[-1]["step"] != t):
            count = t - (rows[-1]["step"] if rows else 0)
            row = {"step": t, **{k: v / count for k, v in running.items()}}
            running = {}
            if evaluator is not None:
                row.update(evaluator(learner, t))
            rows.append(row)
            log.info("step %d %s", t, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    return rows


# ---------------------------------------------------------------- meta test

def meta_test(learner: MetaLearner, dataset: OfflineDataset, task_id, context) -> float:
    """Encode ``context`` once, roll the policy for one episode in ``task_id``, return the return."""
    feats = context.features if hasattr(context, "features") else np.asarray(context)
    if feats.ndim == 2:
        feats = feats[None]
    if dataset.family != learner.family:
        raise ValueError(f"context family {dataset.family} does not match model family {learner.family}")
    task = dataset.task(task_id)
    z = learner.encode(feats[:1])
    return float(rollout_returns(learner, [task], z)[0])


def rollout_returns(learner: MetaLearner, tasks, z) -> np.ndarray:
    """Undiscounted return of pi(.|s, z_i) in tasks[i], one episode each."""
    agent = learner.agent
    z = np.asarray(z, dtype=np.float64)
    _, _, rew, _ = envgen.rollout_batch(tasks[0].family, envgen.param_matrix(tasks),
                                        lambda s, t: agent.act_np(s, z), tasks[0].horizon)
    return rew.sum(axis=1)


@dataclass
class EvalResult:
    returns: np.ndarray
    task_ids: np.ndarray
    origins: list = field(default_factory=list)
    latents: np.ndarray | None = None

    @property
    def mean(self):
        return float(np.mean(self.returns))

    @property
    def std(self):
        return float(np.std(self.returns))


def evaluate(learner: MetaLearner, test_ds: OfflineDataset, mode, rng, checkpoints=None,
             contexts_per_task=1) -> EvalResult:
    """Batched meta-test over every test task.

    IID: ``contexts_per_task`` one-trajectory contexts from each test task's own buffer.
    OOD: one context per (test task, checkpoint) pair, rolled by that checkpoint;
    ``checkpoints`` defaults to the test dataset's own table.
    """
    from .datastore import ood_contexts

    horizon = test_ds.tasks[0].horizon
    tids = test_ds.task_ids
    if mode == "IID":
        q = np.repeat(tids, contexts_per_task)
        ctx = sample_contexts(test_ds, q, horizon, rng)
    elif mode == "OOD":
        table = test_ds.checkpoints if checkpoints is None else list(checkpoints)
        pairs = [(t, c) for t in tids for c in range(len(table))]
        ctx = ood_contexts(test_ds, [p[0] for p in pairs], [p[1] for p in pairs], horizon, rng, table)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    z = learner.encode(ctx.features)
    returns = rollout_returns(learner, [test_ds.task(t) for t in ctx.task_ids], z)
    return EvalResult(returns, ctx.task_ids, ctx.origins, z)
