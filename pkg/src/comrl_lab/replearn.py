"""Context encoder and the task-representation objectives.

Selectors understood by :class:`RepresentationModel`:

=============  =====================================================
FOCAL          distance-metric clustering of task latents
CORRO          InfoNCE over relabeled same-(s, a) negatives
CSRO           FOCAL + lambda * CLUB upper bound on I(z; s, a)
UNICORN-SUP    n_M-way task classification of z
UNICORN-SS     reconstruction of (r, s') + alpha/(1-alpha) * FOCAL
UNICORN-SS-0   reconstruction only (label-free)
=============  =====================================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import envgen
from .diffcore import MLP, Tensor

SELECTORS = ("FOCAL", "CORRO", "CSRO", "UNICORN-SUP", "UNICORN-SS", "UNICORN-SS-0")
LOG_2PI = math.log(2 * math.pi)


@dataclass
class EncoderConfig:
    embed_widths: tuple = (64,)
    latent_dim: int = 5
    head: str = "deterministic"       # or "gaussian"
    activation: str = "relu"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.head not in ("deterministic", "gaussian"):
            raise ValueError(f"unknown encoder head {self.head!r}")


@dataclass
class LossWeights:
    alpha: float = 0.15 / 1.15
    focal_beta: float = 1.0
    focal_exponent: float = 2.0
    focal_eps: float = 0.1
    csro_lambda: float = 1.0
    tau: float = 0.1
    kl_weight: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha} (alpha=1 leaves alpha/(1-alpha) undefined)")
        if self.focal_beta <= 0 or self.focal_eps <= 0 or self.focal_exponent < 1:
            raise ValueError("FOCAL constants need beta>0, eps>0, exponent>=1")
        if self.csro_lambda < 0 or self.tau <= 0 or self.kl_weight < 0:
            raise ValueError("need csro_lambda>=0, tau>0, kl_weight>=0")

    @property
    def ss_coefficient(self) -> float:
        return self.alpha / (1.0 - self.alpha)

    @staticmethod
    def alpha_from_ratio(ratio: float) -> float:
        return ratio / (1.0 + ratio)


@dataclass
class Latent:
    z: np.ndarray
    task_id: int
    origin: str = "IID"


class ContextEncoder:
    """Per-transition MLP embedding, mean-pooled, then an affine projection to the latent.

    With the Gaussian head the projection emits (mean, log-variance).
    """

    def __init__(self, feature_dim: int, cfg: EncoderConfig, seed=0):
        self.cfg = cfg
        self.feature_dim = feature_dim
        widths = [feature_dim, *cfg.embed_widths]
        self.embed = MLP(widths, cfg.activation, seed=seed, name="encoder.embed")
        out = cfg.latent_dim * (2 if cfg.head == "gaussian" else 1)
        self.proj = MLP([widths[-1], out], cfg.activation, seed=seed + 1, name="encoder.proj")

    def parameters(self):
        return self.embed.parameters() + self.proj.parameters()

    def _act(self, h):
        return dc.tanh(h) if self.cfg.activation == "tanh" else dc.relu(h)

    def _check(self, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise ValueError(f"context must be (batch, n>0, features), got shape {feats.shape}")
        if feats.shape[2] != self.feature_dim:
            raise ValueError(f"context feature width {feats.shape[2]} != encoder input {self.feature_dim}")
        return feats

    def head_outputs(self, feats) -> Tensor:
        """Raw projection of pooled embeddings: (B, d) or (B, 2d) for the Gaussian head."""
        feats = self._check(feats)
        b, n, f = feats.shape
        h = self._act(self.embed(dc.constant(feats.reshape(b * n, f))))
        pooled = dc.mean(dc.reshape(h, (b, n, h.shape[1])), axis=1)
        return self.proj(pooled)

    def encode(self, feats) -> Tensor:
        """Differentiable latent; the Gaussian head returns its mean."""
        out = self.head_outputs(feats)
        if self.cfg.head == "gaussian":
            return dc.slice_cols(out, 0, self.cfg.latent_dim)
        return out

    def transition_scores(self, feats2d) -> Tensor:
        """Per-transition embedding projected to latent space, g(x) in the InfoNCE critic."""
        feats2d = np.asarray(feats2d, dtype=np.float64)
        h = self._act(self.embed(dc.constant(feats2d)))
        return dc.slice_cols(self.proj(h), 0, self.cfg.latent_dim)

    def encode_np(self, feats) -> np.ndarray:
        feats = self._check(feats)
        b, n, f = feats.shape
        h = self.embed.forward_np(feats.reshape(b * n, f))
        h = np.tanh(h) if self.cfg.activation == "tanh" else np.maximum(h, 0.0)
        out = self.proj.forward_np(h.reshape(b, n, -1).mean(axis=1))
        return out[:, :self.cfg.latent_dim]


# ---------------------------------------------------------------- losses

def _pairs(b):
    i, j = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
    keep = i != j
    return i[keep], j[keep]


def focal_loss(z: Tensor, labels, w: LossWeights) -> Tensor:
    """Mean over ordered pairs i != j of the attract/repel distance-metric term."""
    labels = np.asarray(labels)
    b = z.shape[0]
    if b < 2:
        raise ValueError("focal_loss needs at least two latents")
    i, j = _pairs(b)
    d2 = dc.sq_dist(dc.gather_rows(z, i), dc.gather_rows(z, j))
    same = (labels[i] == labels[j]).astype(np.float64)
    dn = d2 if w.focal_exponent == 2 else dc.power(d2, w.focal_exponent / 2.0)
    repel = dc.div(dc.constant(np.full(len(i), w.focal_beta)), dc.shift(dn, w.focal_eps))
    terms = dc.add(dc.mul(d2, dc.constant(same)), dc.mul(repel, dc.constant(1.0 - same)))
    return dc.mean(terms)


def infonce_from_logits(logits: Tensor) -> Tensor:
    """Mean of -log softmax(logits)[:, 0]; column 0 holds the positive."""
    return dc.scale(dc.mean(dc.slice_cols(dc.log_softmax(logits), 0, 1)), -1.0)


def corro_negatives(s, a, anchor_tasks, task_params, family, k, rng):
    """Relabel every anchor's (s, a) under ``k`` distinct other tasks.

    ``anchor_tasks`` holds row indices into ``task_params``. Returns (r*, s'*)
    with shapes (A, k) and (A, k, ds).
    """
    n_tasks = len(task_params)
    if k > n_tasks - 1:
        raise ValueError(f"CORRO: {k} negatives requested but only {n_tasks - 1} other tasks exist")
    a_n = len(s)
    # distinct other tasks per anchor: random offsets in 1..n_tasks-1 without replacement
    offs = np.argsort(rng.random((a_n, n_tasks - 1)), axis=1)[:, :k] + 1
    neg_tasks = (np.asarray(anchor_tasks)[:, None] + offs) % n_tasks
    rep_s = np.repeat(s, k, axis=0)
    rep_a = np.repeat(a, k, axis=0)
    nxt, r = envgen.relabel_batch(family, task_params[neg_tasks.reshape(-1)], rep_s, rep_a)
    return r.reshape(a_n, k), nxt.reshape(a_n, k, -1)


def corro_loss(encoder: ContextEncoder, z: Tensor, anchor_feats, anchor_slots, neg_feats, w: LossWeights) -> Tensor:
    """InfoNCE with score exp(<g(x), z> / tau).

    anchor_feats (A, F) positives, neg_feats (A, K, F) relabeled negatives,
    anchor_slots (A,) row of ``z`` each anchor's context produced.
    """
    a_n, k, f = neg_feats.shape
    allx = np.concatenate([anchor_feats[:, None, :], neg_feats], axis=1).reshape(a_n * (k + 1), f)
    g = encoder.transition_scores(allx)
    zr = dc.gather_rows(z, np.repeat(np.asarray(anchor_slots), k + 1))
    logits = dc.reshape(dc.sum_(dc.mul(g, zr), axis=1), (a_n, k + 1))
    return infonce_from_logits(dc.scale(logits, 1.0 / w.tau))


class ClubEstimator:
    """Variational Gaussian q(z | s, a) for the CLUB bound; log-variance is tanh-bounded to +-5."""

    def __init__(self, in_dim, latent_dim, hidden=64, seed=0):
        self.d = latent_dim
        self.net = MLP([in_dim, hidden, 2 * latent_dim], "relu", seed=seed, name="club")

    def parameters(self):
        return self.net.parameters()

    def gaussian(self, xb):
        out = self.net(dc.constant(np.asarray(xb, dtype=np.float64)))
        mu = dc.slice_cols(out, 0, self.d)
        logvar = dc.scale(dc.tanh(dc.scale(dc.slice_cols(out, self.d, 2 * self.d), 0.2)), 5.0)
        if not np.all(np.isfinite(logvar.data)):
            raise dc.NumericalError("CLUB estimator produced a non-finite log-variance")
        return mu, logvar


def _gauss_logpdf(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Row-wise diagonal Gaussian log density."""
    inv_var = dc.exp(dc.scale(logvar, -1.0))
    quad = dc.sum_(dc.mul(dc.square(dc.sub(z, mu)), inv_var), axis=1)
    return dc.scale(dc.add(dc.add(quad, dc.sum_(logvar, axis=1)),
                           dc.constant(np.full(z.shape[0], z.shape[1] * LOG_2PI))), -0.5)


def club_loss(aux: ClubEstimator, z: Tensor, xb) -> Tensor:
    """mean_i [log q(z_i|x_i) - mean_j log q(z_j|x_i)]."""
    b = z.shape[0]
    mu, logvar = aux.gaussian(xb)
    ii, jj = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
    ii, jj = ii.reshape(-1), jj.reshape(-1)
    allp = _gauss_logpdf(dc.gather_rows(z, jj), dc.gather_rows(mu, ii), dc.gather_rows(logvar, ii))
    positive = _gauss_logpdf(z, mu, logvar)
    return dc.sub(dc.mean(positive), dc.mean(allp))


def club_fit_loss(aux: ClubEstimator, z_detached: np.ndarray, xb) -> Tensor:
    """Negative mean log-likelihood of matched (z, x_b) pairs; minimized to fit q."""
    mu, logvar = aux.gaussian(xb)
    return dc.scale(dc.mean(_gauss_logpdf(dc.constant(z_detached), mu, logvar)), -1.0)


def csro_loss(z, labels, aux, xb, w: LossWeights) -> Tensor:
    f = focal_loss(z, labels, w)
    if w.csro_lambda == 0:
        return f
    return dc.add(f, dc.scale(club_loss(aux, z, xb), w.csro_lambda))


def cross_entropy(logits: Tensor, labels, n_classes=None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1] if n_classes is None else n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = dc.sum_(dc.mul(dc.log_softmax(logits), dc.constant(onehot)), axis=1)
    return dc.scale(dc.mean(picked), -1.0)


def unicorn_sup_loss(classifier: MLP, z: Tensor, labels) -> Tensor:
    logits = classifier(z)
    return cross_entropy(logits, labels, classifier.widths[-1])


def recon_loss(decoder: MLP, z_rows: Tensor, s, a, target) -> Tensor:
    """MSE between decoder(z, s, a) and the observed (r, s')."""
    x = dc.concat([z_rows, dc.constant(s), dc.constant(a)], axis=1)
    pred = decoder(x)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"decoder output {pred.shape} does not match targets {target.shape}")
    return dc.mean(dc.square(dc.sub(pred, dc.constant(target))))


def unicorn_ss_loss(recon: Tensor, focal: Tensor | None, w: LossWeights) -> Tensor:
    if w.alpha == 0:
        return recon
    if focal is None:
        raise ValueError("UNICORN-SS with alpha > 0 needs the FOCAL term")
    return dc.add(recon, dc.scale(focal, w.ss_coefficient))


def kl_penalty(mean: Tensor, logvar: Tensor) -> Tensor:
    """Batch-mean KL( N(mean, exp(logvar)) || N(0, I) )."""
    inner = dc.sub(dc.add(dc.square(mean), dc.exp(logvar)), dc.shift(logvar, 1.0))
    return dc.scale(dc.mean(dc.sum_(inner, axis=1)), 0.5)


# ---------------------------------------------------------------- composite model

class RepresentationModel:
    """Encoder plus whatever auxiliary heads the selector needs."""

    def __init__(self, selector, feature_dim, state_dim, action_dim, n_tasks,
                 enc_cfg: EncoderConfig | None = None, weights: LossWeights | None = None,
                 hidden=64, seed=0):
        if selector not in SELECTORS:
            raise ValueError(f"unknown loss selector {selector!r}; choose from {SELECTORS}")
        self.selector = selector
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.weights = weights or LossWeights()
        if selector == "UNICORN-SS-0" and self.weights.alpha != 0:
            self.weights = LossWeights(**{**self.weights.__dict__, "alpha": 0.0})
        if self.weights.kl_weight > 0 and self.enc_cfg.head != "gaussian":
            raise ValueError("kl_weight > 0 requires the Gaussian encoder head")
        self.state_dim, self.action_dim, self.n_tasks = state_dim, action_dim, n_tasks
        d = self.enc_cfg.latent_dim
        self.encoder = ContextEncoder(feature_dim, self.enc_cfg, seed=seed)
        self.decoder = self.classifier = self.club = None
        if selector in ("UNICORN-SS", "UNICORN-SS-0"):
            self.decoder = MLP([d + state_dim + action_dim, hidden, hidden, 1 + state_dim], "relu",
                               seed=seed + 11, name="decoder")
        if selector == "UNICORN-SUP":
            self.classifier = MLP([d, hidden, n_tasks], "relu", seed=seed + 13, name="classifier")
        if selector == "CSRO":
            self.club = ClubEstimator(state_dim + action_dim, d, hidden, seed=seed + 17)

    def head_parameters(self):
        """theta: decoder or classifier parameters (updated with the second learning rate)."""
        if self.decoder is not None:
            return self.decoder.parameters()
        if self.classifier is not None:
            return self.classifier.parameters()
        return []

    def networks(self) -> dict:
        out = {"encoder.embed": self.encoder.embed, "encoder.proj": self.encoder.proj}
        if self.decoder is not None:
            out["decoder"] = self.decoder
        if self.classifier is not None:
            out["classifier"] = self.classifier
        if self.club is not None:
            out["club"] = self.club.net
        return out

    def loss(self, feats, labels, task_params, family, rng, anchors_per_context=8, negatives=4,
             recon_rows=256):
        """Representation loss on a batch of contexts.

        feats (B, n, F) contexts; labels (B,) task labels in [0, n_tasks);
        ``task_params`` rows are indexed by label (needed for CORRO relabeling).
        Reconstruction uses ``recon_rows`` transitions drawn from the pooled contexts
        (all of them when ``recon_rows`` is None or larger than b*n).
        Returns (loss Tensor, z Tensor, parts dict of floats).
        """
        w = self.weights
        ds, da = self.state_dim, self.action_dim
        b, n, f = feats.shape
        parts = {}
        kl = None
        if self.enc_cfg.head == "gaussian":
            out = self.encoder.head_outputs(feats)
            mean = dc.slice_cols(out, 0, self.enc_cfg.latent_dim)
            logvar = dc.slice_cols(out, self.enc_cfg.latent_dim, 2 * self.enc_cfg.latent_dim)
            eps = rng.standard_normal(mean.shape)
            z = dc.add(mean, dc.mul(dc.exp(dc.scale(logvar, 0.5)), dc.constant(eps)))
            if w.kl_weight > 0:
                kl = kl_penalty(mean, logvar)
        else:
            z = self.encoder.encode(feats)
        sel = self.selector
        if sel == "FOCAL":
            total = focal_loss(z, labels, w)
        elif sel == "CSRO":
            pick = rng.integers(0, n, size=b)
            xb = feats[np.arange(b), pick, :ds + da]
            total = csro_loss(z, labels, self.club, xb, w)
        elif sel == "CORRO":
            m = min(anchors_per_context, n)
            cols = np.stack([rng.choice(n, size=m, replace=False) for _ in range(b)])
            anchors = feats[np.arange(b)[:, None], cols].reshape(b * m, f)
            slots_a = np.repeat(np.arange(b), m)
            s, a = anchors[:, :ds], anchors[:, ds:ds + da]
            r_neg, s_neg = corro_negatives(s, a, np.asarray(labels)[slots_a], task_params, family, negatives, rng)
            negf = np.concatenate([np.repeat(s[:, None], negatives, 1), np.repeat(a[:, None], negatives, 1),
                                   r_neg[..., None], s_neg], axis=2)
            total = corro_loss(self.encoder, z, anchors, slots_a, negf, w)
        elif sel == "UNICORN-SUP":
            total = unicorn_sup_loss(self.classifier, z, labels)
        else:
            rows = feats.reshape(b * n, f)
            owner = np.repeat(np.arange(b), n)
            if recon_rows is not None and recon_rows < b * n:
                keep = rng.choice(b * n, size=recon_rows, replace=False)
                rows, owner = rows[keep], owner[keep]
            z_rows = dc.gather_rows(z, owner)
            target = np.concatenate([rows[:, ds + da:ds + da + 1], rows[:, ds + da + 1:]], axis=1)
            rec = recon_loss(self.decoder, z_rows, rows[:, :ds], rows[:, ds:ds + da], target)
            parts["recon"] = rec.item()
            foc = None
            if w.alpha > 0:
                foc = focal_loss(z, labels, w)
                parts["focal"] = foc.item()
            total = unicorn_ss_loss(rec, foc, w)
        if kl is not None:
            parts["kl"] = kl.item()
            total = dc.add(total, dc.scale(kl, w.kl_weight))
        parts["rep_loss"] = total.item()
        return total, z, parts
