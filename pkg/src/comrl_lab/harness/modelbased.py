"""Latent-perturbed imaginary rollouts from a decoder ensemble, mixed into RL batches."""
from __future__ import annotations

import numpy as np

from .. import datastore, envgen
from ..diffcore import MLP, Adam, backward, constant
from ..replearn import recon_loss


class ImaginaryMixer:
    """RL-batch hook: member 0 of the ensemble is the learner's own decoder, the rest are
    extra decoders fitted on detached latents with distinct seeds.

    After ``warmup`` steps a fraction of each RL batch is replaced by rollouts of length
    ``rollout_len`` generated with z + eps, eps ~ N(0, (noise_scale * std(z))^2) per dimension.
    With ``penalty`` > 0 imagined rewards are lowered by penalty * (ensemble std of r) and with
    ``data_actions`` the first imagined step reuses the logged action instead of the policy's.
    """

    def __init__(self, learner, ensemble=5, noise_scale=0.1, rollout_len=5, fraction=0.5, warmup=0, seed=0,
                 fit_rows=128, action_noise=0.3, penalty=0.0, data_actions=False):
        if ensemble < 2:
            raise ValueError("model-based mixing needs an ensemble of at least 2 decoders")
        if learner.rep.decoder is None:
            raise ValueError("model-based mixing needs a UNICORN-SS learner (it owns a decoder)")
        self.family = learner.family
        self.ds, self.da = learner.state_dim, learner.action_dim
        base = learner.rep.decoder
        self.extras = [MLP(base.widths, base.activation, seed=seed + 1000 + k, name=f"decoder_ens{k}")
                       for k in range(1, ensemble)]
        self.opts = [Adam(m.parameters(), learner.cfg.lr_head) for m in self.extras]
        self.learner = learner
        self.noise_scale, self.rollout_len = noise_scale, rollout_len
        self.fraction, self.warmup = fraction, warmup
        self.fit_rows, self.action_noise = fit_rows, action_noise
        if penalty < 0:
            raise ValueError("uncertainty penalty must be >= 0")
        self.penalty, self.data_actions = penalty, data_actions

    @property
    def members(self):
        return [self.learner.rep.decoder, *self.extras]

    def predict(self, z, s, a) -> np.ndarray:
        """Per-member decoder means, shape (K, B, 1 + ds)."""
        x = np.concatenate([z, s, a], axis=1)
        return np.stack([m.forward_np(x) for m in self.members])

    def _fit_extras(self, ctx, z, rng):
        b, n, f = ctx.features.shape
        rows = ctx.features.reshape(b * n, f)
        keep = rng.choice(b * n, size=min(self.fit_rows, b * n), replace=False)
        rows, owner = rows[keep], np.repeat(np.arange(b), n)[keep]
        ds, da = self.ds, self.da
        target = rows[:, ds + da:]
        for m, opt in zip(self.extras, self.opts):
            loss = recon_loss(m, constant(z[owner]), rows[:, :ds], rows[:, ds:ds + da], target)
            opt.step(backward(loss))

    def imagine(self, s0, z0, rng, policy=None, a0=None):
        """Roll ``rollout_len`` steps from s0 under perturbed latents; returns stacked transitions."""
        z_scale = self.noise_scale * self._z_std
        zp = z0 + z_scale * rng.standard_normal(z0.shape)
        policy = policy or self.learner.agent.act_np
        s = s0
        obs, act, rew, nxt = [], [], [], []
        for t in range(self.rollout_len):
            if t == 0 and a0 is not None:
                a = a0
            else:
                a = policy(s, zp) + self.action_noise * rng.standard_normal((len(s), self.da))
                a = envgen.clip_actions(self.family, a, counter=None)
            members = self.predict(zp, s, a)
            pred = members.mean(axis=0)
            r, s2 = pred[:, 0], pred[:, 1:]
            if self.penalty > 0:
                r = r - self.penalty * members[:, :, 0].std(axis=0)
            if self.family in ("PointDir", "PointVel"):
                s2 = np.clip(s2, -envgen.ARENA, envgen.ARENA)
            obs.append(s), act.append(a), rew.append(r), nxt.append(s2)
            s = s2
        return (np.concatenate(obs), np.concatenate(act), np.concatenate(rew), np.concatenate(nxt),
                np.tile(zp, (self.rollout_len, 1)))

    def __call__(self, learner, ctx, z, batch, z_rows, rng):
        self._fit_extras(ctx, z, rng)
        if learner.step_count < self.warmup:
            return batch, z_rows
        n_total = len(z_rows)
        n_starts = max(1, int(round(self.fraction * n_total)) // self.rollout_len)
        n_imag = n_starts * self.rollout_len
        self._z_std = z.std(axis=0)
        real = np.sort(rng.choice(n_total, size=n_total - n_imag, replace=False))
        starts = rng.choice(n_total, size=n_starts, replace=False)
        a0 = batch["act"][starts] if self.data_actions else None
        o, a, r, s2, zp = self.imagine(batch["obs"][starts], z_rows[starts], rng, a0=a0)
        out = {
            "obs": np.concatenate([batch["obs"][real], o]),
            "act": np.concatenate([batch["act"][real], a]),
            "rew": np.concatenate([batch["rew"][real], r]),
            "next_obs": np.concatenate([batch["next_obs"][real], s2]),
            "done": np.zeros(n_total),
        }
        return out, np.concatenate([z_rows[real], zp])

    def disagreement(self, z, s, a) -> float:
        """Mean across rows of the ensemble std of predicted (r, s')."""
        return float(self.predict(z, s, a).std(axis=0).mean())

    def disagreement_on(self, ds, latents, rng, task_ids=None, rows_per_task=64) -> float:
        """Ensemble disagreement on logged (s, a) of each task paired with that task's latent."""
        task_ids = list(ds.task_ids if task_ids is None else task_ids)
        latents = np.asarray(latents)
        zs, ss, aa = [], [], []
        for tid, z in zip(task_ids, latents):
            b = datastore.sample_rl_batch(ds, tid, rows_per_task, rng)
            zs.append(np.tile(z, (rows_per_task, 1)))
            ss.append(b["obs"])
            aa.append(b["act"])
        return self.disagreement(np.concatenate(zs), np.concatenate(ss), np.concatenate(aa))
