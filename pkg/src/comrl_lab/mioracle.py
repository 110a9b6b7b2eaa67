"""Exact information quantities on small discrete joints, plus the Gaussian
concentration experiment and a plug-in MI probe for trained GridGoal encoders.

Variables of a joint are named ``M``, ``Xb``, ``Xt``, ``Z`` (axes 0..3).
All quantities are in nats.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

VARS = ("M", "Xb", "Xt", "Z")
MAX_ALPHABET = 16
TOL = 1e-10


class MarkovViolation(ValueError):
    """The joint does not satisfy I(Z; M | X) = 0."""

    def __init__(self, measured):
        super().__init__(f"Markov precondition violated: I(Z;M|X) = {measured:.3e} > {TOL:g}")
        self.measured = measured


def _axes(subset) -> tuple:
    if isinstance(subset, (str, int)):
        subset = (subset,)
    out = set()
    for v in subset:
        if isinstance(v, str):
            if v == "X":
                out.update((1, 2))
                continue
            if v not in VARS:
                raise ValueError(f"unknown variable {v!r}; use one of {VARS} or 'X'")
            out.add(VARS.index(v))
        else:
            if not 0 <= int(v) < 4:
                raise ValueError(f"axis {v} out of range")
            out.add(int(v))
    return tuple(sorted(out))


def _disjoint(*groups):
    seen = set()
    for g in groups:
        if seen & set(g):
            raise ValueError(f"variable subsets overlap: {groups}")
        seen.update(g)


@dataclass
class DiscreteJoint:
    """Probability table p(m, x_b, x_t, z)."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 4:
            raise ValueError(f"joint must have 4 axes (M, Xb, Xt, Z), got {p.ndim}")
        if any(n < 1 or n > MAX_ALPHABET for n in p.shape):
            raise ValueError(f"alphabet sizes must lie in 1..{MAX_ALPHABET}, got {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("joint has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint sums to {p.sum():.15f}, not 1")
        self.p = p

    @property
    def sizes(self) -> tuple:
        return self.p.shape

    def marginal(self, subset) -> np.ndarray:
        keep = _axes(subset)
        drop = tuple(i for i in range(4) if i not in keep)
        return self.p.sum(axis=drop) if drop else self.p


def _h(p: np.ndarray) -> float:
    q = p[p > 0]
    return float(-np.sum(q * np.log(q)))


def entropy(joint: DiscreteJoint, subset) -> float:
    ax = _axes(subset)
    if not ax:
        return 0.0
    return _h(joint.marginal(ax))


def mutual_info(joint: DiscreteJoint, a, b) -> float:
    """I(A; B) = H(A) + H(B) - H(A, B); arguments are put in canonical order first."""
    a, b = _axes(a), _axes(b)
    _disjoint(a, b)
    if b < a:
        a, b = b, a
    return entropy(joint, a) + entropy(joint, b) - entropy(joint, a + b)


def conditional_mi(joint: DiscreteJoint, a, b, c) -> float:
    """I(A; B | C) = H(A,C) + H(B,C) - H(A,B,C) - H(C)."""
    a, b, c = _axes(a), _axes(b), _axes(c)
    _disjoint(a, b, c)
    if not c:
        return mutual_info(joint, a, b)
    if b < a:
        a, b = b, a
    return (entropy(joint, a + c) + entropy(joint, b + c)) - (entropy(joint, a + b + c) + entropy(joint, c))


def interaction_info(joint: DiscreteJoint, a, b, c) -> float:
    """I(A; B; C) = I(A; B) - I(A; B | C). Sign-indefinite in general."""
    return mutual_info(joint, a, b) - conditional_mi(joint, a, b, c)


def random_joint(rng: np.random.Generator, sizes=(4, 4, 4, 4), concentration=1.0) -> DiscreteJoint:
    p = rng.dirichlet(np.full(int(np.prod(sizes)), concentration)).reshape(sizes)
    return DiscreteJoint(p / p.sum())


# ---------------------------------------------------------------- generative model

def _row_stochastic(name, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-12):
        raise ValueError(f"{name}: rows must be non-negative and sum to 1 within 1e-12")
    return t


@dataclass
class COMRLGenerativeModel:
    """p(m) p(x_b | m) p(x_t | x_b, m) p(z | x_b, x_t)."""

    p_m: np.ndarray           # (|M|,)
    p_xb_m: np.ndarray        # (|M|, |Xb|)
    p_xt_xbm: np.ndarray      # (|M|, |Xb|, |Xt|)
    p_z_x: np.ndarray         # (|Xb|, |Xt|, |Z|)

    def __post_init__(self):
        self.p_m = _row_stochastic("p(m)", self.p_m)
        self.p_xb_m = _row_stochastic("p(x_b|m)", self.p_xb_m)
        self.p_xt_xbm = _row_stochastic("p(x_t|x_b,m)", self.p_xt_xbm)
        self.p_z_x = _row_stochastic("p(z|x)", self.p_z_x)
        nm, nb, nt = self.p_xt_xbm.shape
        if self.p_m.shape != (nm,) or self.p_xb_m.shape != (nm, nb) or self.p_z_x.shape[:2] != (nb, nt):
            raise ValueError("factor shapes disagree")

    def joint(self) -> DiscreteJoint:
        p = (self.p_m[:, None, None, None] * self.p_xb_m[:, :, None, None]
             * self.p_xt_xbm[:, :, :, None] * self.p_z_x[None])
        return DiscreteJoint(p / p.sum())

    @classmethod
    def random(cls, rng: np.random.Generator, sizes=(4, 4, 4, 4), concentration=1.0) -> "COMRLGenerativeModel":
        nm, nb, nt, nz = sizes

        def rows(*shape):
            return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
        return cls(rng.dirichlet(np.full(nm, concentration)), rows(nm, nb), rows(nm, nb, nt), rows(nb, nt, nz))


@dataclass
class CheckRow:
    check: str
    lhs: float
    rhs: float
    margin: float
    passed: bool


@dataclass
class MarkovReport:
    rows: list
    markov_residual: float
    interaction_info: float    # I(Z; M; Xb), recorded but never asserted

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "lhs", "rhs", "margin", "pass"])
    for r in rows:
        w.writerow([r.check, repr(r.lhs), repr(r.rhs), repr(r.margin), "1" if r.passed else "0"])
    return buf.getvalue()


def _ineq(name, lhs, rhs):
    """lhs >= rhs - TOL; margin is the signed slack."""
    return CheckRow(name, lhs, rhs, lhs - rhs, lhs >= rhs - TOL)


def _eq(name, lhs, rhs):
    gap = abs(lhs - rhs)
    return CheckRow(name, lhs, rhs, gap, gap <= TOL)


def verify_markov_bounds(model) -> MarkovReport:
    """Evaluate the five bound/identity checks on a COMRL model (or its joint).

    Raises :class:`MarkovViolation` when Z depends on M beyond X.
    """
    j = model.joint() if isinstance(model, COMRLGenerativeModel) else model
    resid = conditional_mi(j, "Z", "M", "X")
    if resid > TOL:
        raise MarkovViolation(resid)
    i_zm = mutual_info(j, "Z", "M")
    i_zx = mutual_info(j, "Z", "X")
    i_mxb = mutual_info(j, "M", "Xb")
    i_mxb_z = conditional_mi(j, "M", "Xb", "Z")
    i_mxt_xb = conditional_mi(j, "M", "Xt", "Xb")
    i_mxt_xbz = conditional_mi(j, "M", "Xt", ("Xb", "Z"))
    i_zm_xb = conditional_mi(j, "Z", "M", "Xb")
    h_xt_zxb = entropy(j, ("Xt", "Z", "Xb")) - entropy(j, ("Z", "Xb"))
    rows = [
        CheckRow("a_dpi", i_zm, i_zx, i_zx - i_zm, i_zm <= i_zx + TOL),
        _ineq("b_lemma_core", i_mxb - i_mxb_z, -i_mxt_xb + i_mxt_xbz),
        _eq("c_chain_identity", i_zm_xb, i_mxt_xb - i_mxt_xbz),
        _ineq("d_chain_inequality", i_zm_xb, i_mxt_xb - h_xt_zxb),
        _eq("e_chain_rule", mutual_info(j, "Xt", ("Z", "Xb")),
            conditional_mi(j, "Z", "Xt", "Xb") + mutual_info(j, "Xt", "Xb")),
    ]
    return MarkovReport(rows, resid, interaction_info(j, "Z", "M", "Xb"))


def decomposition_residual(joint: DiscreteJoint) -> float:
    """I(Z;X) - I(Z;Xt|Xb) - I(Z;Xb); zero for every joint."""
    return mutual_info(joint, "Z", "X") - conditional_mi(joint, "Z", "Xt", "Xb") - mutual_info(joint, "Z", "Xb")


# ---------------------------------------------------------------- Gaussian concentration

@dataclass
class GaussianTaskModel:
    """Finite task population with p(z|m) = N(mu_m, diag(var_m)); the prior is uniform over it."""

    means: np.ndarray          # (n_tasks, d)
    variances: np.ndarray      # (n_tasks, d)
    delta: float = 0.1

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must share a shape")
        if not np.all(self.variances > 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("singular covariance: every variance must be positive and finite")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def n_tasks(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def conditional_entropies(self) -> np.ndarray:
        """H(Z | M=m) = 0.5 * log((2 pi e)^d |Sigma_m|) for every task."""
        return 0.5 * (self.dim * math.log(2 * math.pi * math.e) + np.sum(np.log(self.variances), axis=1))

    def entropy_variance(self) -> float:
        """Var over the prior of H(Z|M=m) = Var(log|Sigma_m|) / 4."""
        half_logdet = 0.5 * np.sum(np.log(self.variances), axis=1)
        return float(np.var(half_logdet - half_logdet[0]))

    @classmethod
    def random(cls, n_tasks, dim, rng, delta=0.1, spread=1.0, homogeneous=False) -> "GaussianTaskModel":
        means = rng.standard_normal((n_tasks, dim))
        if homogeneous:
            var = np.tile(np.exp(rng.uniform(-spread, spread, size=dim)), (n_tasks, 1))
        else:
            var = np.exp(rng.uniform(-spread, spread, size=(n_tasks, dim)))
        return cls(means, var, delta)


@dataclass
class ConcentrationRow:
    n_m: int
    bound: float
    frequency: float
    q25: float
    median: float
    q75: float


def theorem2_experiment(model: GaussianTaskModel, n_m_grid=(5, 20, 80), trials=10_000, seed=0) -> list:
    """Monte Carlo coverage of the Chebyshev radius sqrt(Var / (n_M delta)) by |I_hat - I_bar|."""
    if trials < 1000:
        raise ValueError("theorem2_experiment needs at least 1000 trials")
    rng = np.random.default_rng(seed)
    h = model.conditional_entropies()
    dev = h - h[0]
    dev = dev - dev.mean()          # exact zeros when every task shares one covariance
    var = model.entropy_variance()
    out = []
    for n in n_m_grid:
        idx = rng.integers(0, model.n_tasks, size=(trials, int(n)))
        err = np.abs(dev[idx].mean(axis=1))
        bound = math.sqrt(var / (int(n) * model.delta))
        q25, med, q75 = np.quantile(err, [0.25, 0.5, 0.75])
        out.append(ConcentrationRow(int(n), bound, float(np.mean(err <= bound)), float(q25), float(med), float(q75)))
    return out


# ---------------------------------------------------------------- empirical probe

def _codes(cols) -> np.ndarray:
    """Dense integer code for each row of stacked discrete columns."""
    stacked = np.stack([np.asarray(c, dtype=np.int64) for c in cols], axis=1)
    _, inv = np.unique(stacked, axis=0, return_inverse=True)
    return inv.reshape(-1)


def _plugin_h(*cols) -> float:
    counts = np.bincount(_codes(cols))
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def plugin_mi(a, b, c=None) -> float:
    """Plug-in I(A; B) or I(A; B | C) from aligned sample columns (tuples allowed)."""
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    if c is None:
        return _plugin_h(*a) + _plugin_h(*b) - _plugin_h(*a, *b)
    c = c if isinstance(c, tuple) else (c,)
    return _plugin_h(*a, *c) + _plugin_h(*b, *c) - _plugin_h(*a, *b, *c) - _plugin_h(*c)


def bin_latents(z: np.ndarray, n_bins=16, seed=0) -> np.ndarray:
    """k-means cell index of each latent row (at most ``n_bins`` cells)."""
    from scipy.cluster.vq import kmeans2

    z = np.asarray(z, dtype=np.float64)
    if n_bins < 1 or n_bins > MAX_ALPHABET:
        raise ValueError(f"n_bins must lie in 1..{MAX_ALPHABET}")
    k = min(n_bins, len(np.unique(z, axis=0)))
    if k <= 1:
        return np.zeros(len(z), dtype=np.int64)
    _, labels = kmeans2(z, k, seed=np.random.default_rng(seed), minit="++")
    return labels.astype(np.int64)


@dataclass
class GapReport:
    i_zm: float
    i_zx: float
    i_zxb: float
    i_zxt_given_xb: float
    empty_fraction: float
    undersampled: bool
    n_samples: int
    extra: dict = field(default_factory=dict)

    @property
    def spurious_fraction(self) -> float:
        return self.i_zxb / self.i_zx if self.i_zx > 0 else 0.0

    @property
    def residual(self) -> float:
        return self.i_zx - self.i_zxb - self.i_zxt_given_xb


def empirical_mi_gap(encoder, dataset, n_bins=16, contexts_per_task=20, seed=0) -> GapReport:
    """Plug-in decomposition I(Z;X) = I(Z;Xb) + I(Z;Xt|Xb) for a GridGoal encoder.

    Every transition of every sampled context is one sample (m, x_b, x_t, z-cell).
    ``encoder`` exposes ``encode_np(feats)`` or is a callable ``(feats, task_ids) -> z``.
    """
    from . import envgen
    from .datastore import sample_contexts

    if dataset.family != "GridGoal":
        raise ValueError("empirical_mi_gap needs an enumerable family (GridGoal)")
    rng = np.random.default_rng(seed)
    tids = np.repeat(dataset.task_ids, contexts_per_task)
    n = dataset.tasks[0].horizon
    ctx = sample_contexts(dataset, tids, n, rng)
    feats = ctx.features
    z = encoder.encode_np(feats) if hasattr(encoder, "encode_np") else encoder(feats, tids)
    cells = bin_latents(np.asarray(z), n_bins, seed)

    ds, da = dataset.state_dim, dataset.action_dim
    b = len(tids)
    flat = feats.reshape(b * n, -1)
    s = flat[:, :ds].astype(np.int64)
    move = envgen._move_index(flat[:, ds:ds + da])
    r = np.rint(flat[:, ds + da]).astype(np.int64)
    s2 = flat[:, ds + da + 1:].astype(np.int64)
    g = envgen.GRID
    xb = (s[:, 1] * g + s[:, 0]) * 4 + move
    xt = r * g * g + s2[:, 1] * g + s2[:, 0]
    m = np.repeat(np.searchsorted(np.sort(dataset.task_ids), tids), n)
    zc = np.repeat(cells, n)

    # undersampling: empty cells of the (Z, Xb) table over the observed alphabets
    occupied = len(np.unique(np.stack([zc, xb], 1), axis=0))
    total = len(np.unique(zc)) * len(np.unique(xb))
    empty = 1.0 - occupied / total
    i_zx = plugin_mi(zc, (xb, xt))
    return GapReport(i_zm=plugin_mi(zc, m), i_zx=i_zx, i_zxb=plugin_mi(zc, xb),
                     i_zxt_given_xb=plugin_mi(zc, xt, xb), empty_fraction=empty,
                     undersampled=empty > 0.5, n_samples=len(zc),
                     extra={"h_m": _plugin_h(m), "z_cells": int(len(np.unique(cells)))})
