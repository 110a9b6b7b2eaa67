"""Experiment protocols: IID/OOD pipeline, quality tiers, alpha sweep, task-OOD, embeddings."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import datastore, envgen
from ..diffcore import load_weights, save_weights
from ..offlinerl import MetaLearner, evaluate, meta_train, rollout_returns
from .config import ConfigError, ExperimentConfig
from .modelbased import ImaginaryMixer
from .plotting import write_curves_svg

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("rep_loss", "recon", "focal", "club_fit", "kl", "critic_loss", "actor_loss")
METRIC_COLUMNS = ("seed", "step", *LOSS_COLUMNS, "iid_mean", "iid_std", "ood_mean", "ood_std")


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> str:
    """Write RFC-4180 CSV with a fixed column order; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        vals = [r.get(k) for k in header] if isinstance(r, dict) else list(r)
        w.writerow([_fmt(v) for v in vals])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(text.encode("utf-8"))
    return text


# ---------------------------------------------------------------- tasks and data

def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def build_tasks(cfg: ExperimentConfig, seed: int):
    """Disjoint train/test task lists for one seed."""
    tasks = envgen.make_tasks(cfg.family, cfg.n_train_tasks + cfg.n_test_tasks, _derived_seed(cfg.data_seed, seed, 1),
                              horizon=cfg.horizon)
    return tasks[:cfg.n_train_tasks], tasks[cfg.n_train_tasks:]


def build_datasets(cfg: ExperimentConfig, seed: int, tiers=None, episodes_per_tier=None, tasks=None):
    train_tasks, test_tasks = tasks if tasks is not None else build_tasks(cfg, seed)
    tiers = tuple(tiers or cfg.tiers)
    eps = episodes_per_tier or cfg.episodes_per_tier
    train = envgen.collect_dataset(train_tasks, tiers, eps, _derived_seed(cfg.data_seed, seed, 2))
    test = envgen.collect_dataset(test_tasks, tiers, eps, _derived_seed(cfg.data_seed, seed, 3))
    return train, test


def dataset_paths(out_dir, seed):
    d = Path(out_dir) / "datasets"
    return d / f"seed{seed}_train.cmrlds", d / f"seed{seed}_test.cmrlds"


def collect(cfg: ExperimentConfig, out_dir) -> list:
    written = []
    for seed in cfg.seeds:
        train, test = build_datasets(cfg, seed)
        p_train, p_test = dataset_paths(out_dir, seed)
        p_train.parent.mkdir(parents=True, exist_ok=True)
        datastore.save(train, p_train)
        datastore.save(test, p_test)
        written += [p_train, p_test]
    return written


def load_or_build(cfg, seed, out_dir=None):
    if out_dir is not None:
        p_train, p_test = dataset_paths(out_dir, seed)
        if p_train.exists() and p_test.exists():
            train, test = datastore.load(p_train), datastore.load(p_test)
            if train.family != cfg.family:
                raise ConfigError(f"stored dataset family {train.family} != config family {cfg.family}")
            return train, test
    return build_datasets(cfg, seed)


# ---------------------------------------------------------------- one training run

def make_learner(cfg: ExperimentConfig, dataset, seed, loss=None) -> MetaLearner:
    return MetaLearner(loss or cfg.loss, dataset, cfg.train_config(seed), cfg.loss_weights(),
                       cfg.encoder_config(), cfg.brac_config())


def eval_rng(seed, step):
    """Evaluation randomness depends only on (seed, step): every method sees the same contexts."""
    return np.random.default_rng(_derived_seed(seed, step, 99))


def evaluate_both(learner, cfg, train_ds, test_ds, seed, step) -> dict:
    rng = eval_rng(seed, step)
    iid = evaluate(learner, test_ds, "IID", rng, contexts_per_task=cfg.eval_contexts_per_task)
    ood = evaluate(learner, test_ds, "OOD", rng, checkpoints=train_ds.checkpoints)
    return {"iid_mean": iid.mean, "iid_std": iid.std, "ood_mean": ood.mean, "ood_std": ood.std}


@dataclass
class SeedResult:
    seed: int
    rows: list
    learner: MetaLearner | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.rows[-1]


def train_seed(cfg: ExperimentConfig, seed: int, loss=None, datasets=None, hook_factory=None,
               evaluator=None) -> SeedResult:
    """Meta-train one seed and evaluate at every eval interval (and at the last step)."""
    train_ds, test_ds = datasets if datasets is not None else build_datasets(cfg, seed)
    learner = make_learner(cfg, train_ds, seed, loss)
    if hook_factory is not None:
        learner.rl_hook = hook_factory(learner)
    evaluator = evaluator or (lambda lr, step: evaluate_both(lr, cfg, train_ds, test_ds, seed, step))
    t0 = time.perf_counter()
    rows = meta_train(learner, train_ds, cfg.training_steps, np.random.default_rng(_derived_seed(seed, 4)),
                      eval_every=cfg.eval_interval, evaluator=evaluator)
    for r in rows:
        r["seed"] = seed
    return SeedResult(seed, rows, learner, time.perf_counter() - t0)


@dataclass
class RunResult:
    config: ExperimentConfig
    seeds: list

    @property
    def rows(self) -> list:
        return [r for s in self.seeds for r in s.rows]

    def final_mean(self, key) -> float:
        return float(np.mean([s.final[key] for s in self.seeds]))


def run_pipeline(cfg: ExperimentConfig, out_dir=None, loss=None) -> RunResult:
    """Full pipeline for every seed; writes metrics.csv, timing.csv, curves.svg, checkpoints."""
    results = []
    for seed in cfg.seeds:
        datasets = load_or_build(cfg, seed, out_dir)
        res = train_seed(cfg, seed, loss, datasets)
        results.append(res)
        if out_dir is not None:
            ck = Path(out_dir) / "checkpoints" / f"seed{seed}.cmrlw"
            ck.parent.mkdir(parents=True, exist_ok=True)
            save_weights(ck, res.learner.state_dict())
    run = RunResult(cfg, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        write_csv(out / "metrics.csv", METRIC_COLUMNS, run.rows)
        # wall-clock differs run to run, so it lives beside the metrics rather than inside them
        write_csv(out / "timing.csv", ("seed", "seconds"), [{"seed": s.seed, "seconds": s.seconds} for s in results])
        write_curves_svg(out / "curves.svg", run.rows, title=f"{cfg.family} {loss or cfg.loss}")
    return run


def load_learner(cfg: ExperimentConfig, out_dir, seed, loss=None):
    train_ds, test_ds = load_or_build(cfg, seed, out_dir)
    learner = make_learner(cfg, train_ds, seed, loss)
    path = Path(out_dir) / "checkpoints" / f"seed{seed}.cmrlw"
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}; run `train` first")
    learner.load_state_dict(load_weights(path))
    return learner, train_ds, test_ds


def run_eval(cfg: ExperimentConfig, out_dir, loss=None) -> list:
    rows = []
    for seed in cfg.seeds:
        learner, train_ds, test_ds = load_learner(cfg, out_dir, seed, loss)
        rows.append({"seed": seed, "step": cfg.training_steps,
                     **evaluate_both(learner, cfg, train_ds, test_ds, seed, cfg.training_steps)})
    write_csv(Path(out_dir) / "eval.csv", ("seed", "step", "iid_mean", "iid_std", "ood_mean", "ood_std"), rows)
    return rows


# ---------------------------------------------------------------- quality tiers

def behavior_return(ds) -> float:
    """Mean undiscounted episode return logged in a dataset."""
    total, count = 0.0, 0
    for b in ds.buffers.values():
        pos = 0
        for _, ln in b.episodes:
            total += float(b.rew[pos:pos + ln].sum())
            pos += ln
            count += 1
    return total / max(count, 1)


def random_z_return(learner, test_ds, seed) -> float:
    rng = np.random.default_rng(_derived_seed(seed, 5))
    z = rng.standard_normal((len(test_ds.tasks), learner.latent_dim))
    return float(np.mean(rollout_returns(learner, test_ds.tasks, z)))


QUALITY_COLUMNS = ("tier", "seed", "n_transitions", "behavior_return", "iid_mean", "ood_mean", "random_z_mean")


def run_quality_sweep(cfg: ExperimentConfig, tiers=None, out_dir=None, loss=None) -> list:
    """Single-tier datasets the size of the mixed one; one pipeline per tier."""
    tiers = list(tiers or envgen.TIERS)
    eps = cfg.episodes_per_tier * len(cfg.tiers)
    rows = []
    for seed in cfg.seeds:
        tasks = build_tasks(cfg, seed)
        mixed_size = build_datasets(cfg, seed, tasks=tasks)[0].n_transitions()
        for tier in tiers:
            train_ds, test_ds = build_datasets(cfg, seed, tiers=[tier], episodes_per_tier=eps, tasks=tasks)
            if train_ds.n_transitions() != mixed_size:
                raise ConfigError(f"tier {tier} dataset has {train_ds.n_transitions()} transitions, "
                                  f"mixed has {mixed_size}")
            res = train_seed(cfg, seed, loss, (train_ds, test_ds))
            rows.append({"tier": tier, "seed": seed, "n_transitions": train_ds.n_transitions(),
                         "behavior_return": behavior_return(train_ds), "iid_mean": res.final["iid_mean"],
                         "ood_mean": res.final["ood_mean"],
                         "random_z_mean": random_z_return(res.learner, test_ds, seed)})
    if out_dir is not None:
        write_csv(Path(out_dir) / "quality.csv", QUALITY_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------- alpha sweep

def alpha_point(point):
    """Grid point -> (label, loss selector, ratio)."""
    if point == "FOCAL":
        return "FOCAL", "FOCAL", None
    ratio = float(point)
    if ratio == 0:
        return "0", "UNICORN-SS-0", 0.0
    return repr(ratio), "UNICORN-SS", ratio


ALPHA_COLUMNS = ("point", "loss", "seed", "iid_mean", "ood_mean")


def run_alpha_sweep(cfg: ExperimentConfig, alpha_grid=None, out_dir=None, known=None) -> list:
    """One pipeline per grid point; ``known`` maps (label, seed) -> final metrics to reuse."""
    grid = list(alpha_grid if alpha_grid is not None else cfg.alpha_grid)
    for p in grid:
        if p != "FOCAL" and not (isinstance(p, (int, float)) and p >= 0):
            raise ConfigError(f"alpha grid point {p!r} is not a ratio >= 0 or 'FOCAL'")
    known = known or {}
    rows = []
    for p in grid:
        label, loss, ratio = alpha_point(p)
        sub = cfg if ratio is None else cfg.replace(weight_alpha_ratio=ratio)
        for seed in cfg.seeds:
            final = known.get((label, seed))
            if final is None:
                final = train_seed(sub, seed, loss).final
            rows.append({"point": label, "loss": loss, "seed": seed, "iid_mean": final["iid_mean"],
                         "ood_mean": final["ood_mean"]})
    if out_dir is not None:
        write_csv(Path(out_dir) / "alpha.csv", ALPHA_COLUMNS, rows)
    return rows


def alpha_means(rows) -> dict:
    out = {}
    for r in rows:
        out.setdefault(r["point"], []).append(r["ood_mean"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------- task-OOD split

PARAM_RANGE = {"PointDir": (0.0, 2 * math.pi), "PointVel": (0.1, 1.0)}


def taskood_tasks(cfg: ExperimentConfig, seed):
    """Train tasks inside the parameter window, held-out tasks at both extremes outside it."""
    if cfg.family not in PARAM_RANGE:
        raise ConfigError(f"task-OOD split needs a family sortable by one parameter, got {cfg.family}")
    lo, hi = PARAM_RANGE[cfg.family]
    w0, w1 = cfg.taskood_train_window
    a, b = lo + w0 * (hi - lo), lo + w1 * (hi - lo)
    rng = np.random.default_rng(_derived_seed(cfg.data_seed, seed, 6))
    train_p = np.sort(rng.uniform(a, b, cfg.n_train_tasks))
    n_low = cfg.n_test_tasks // 2
    low = rng.uniform(lo, a, n_low) if a > lo else np.full(n_low, lo)
    high = rng.uniform(b, hi, cfg.n_test_tasks - n_low) if hi > b else np.full(cfg.n_test_tasks - n_low, hi)
    test_p = np.sort(np.concatenate([low, high]))
    mk = lambda i, p: envgen.TaskSpec(cfg.family, i, (float(p),), cfg.horizon)  # noqa: E731
    train = [mk(i, p) for i, p in enumerate(train_p)]
    test = [mk(cfg.n_train_tasks + i, p) for i, p in enumerate(test_p)]
    return train, test


TASKOOD_COLUMNS = ("variant", "seed", "heldout_mean", "heldout_std", "disagreement_train", "disagreement_heldout")


def heldout_eval(learner, cfg, test_ds, seed):
    return evaluate(learner, test_ds, "IID", eval_rng(seed, cfg.training_steps),
                    contexts_per_task=cfg.eval_contexts_per_task)


def run_taskood_modelbased(cfg: ExperimentConfig, out_dir=None, variants=("context-only", "model-based")) -> list:
    """Context-only UNICORN-SS vs the same learner trained with imaginary latent-perturbed rollouts."""
    rows = []
    for seed in cfg.seeds:
        tasks = taskood_tasks(cfg, seed)
        train_ds, test_ds = build_datasets(cfg, seed, tasks=tasks)
        no_eval = lambda lr, step: {}  # noqa: E731
        for variant in variants:
            factory = None
            if variant == "model-based":
                factory = lambda lr: ImaginaryMixer(  # noqa: E731
                    lr, cfg.taskood_ensemble, cfg.taskood_noise_scale, cfg.taskood_rollout_length,
                    cfg.taskood_imaginary_fraction, cfg.taskood_warmup, seed,
                    penalty=cfg.taskood_uncertainty_penalty, data_actions=cfg.taskood_data_actions)
            res = train_seed(cfg, seed, "UNICORN-SS", (train_ds, test_ds), factory, evaluator=no_eval)
            ev = heldout_eval(res.learner, cfg, test_ds, seed)
            row = {"variant": variant, "seed": seed, "heldout_mean": ev.mean, "heldout_std": ev.std}
            if variant == "model-based":
                mixer = res.learner.rl_hook
                rng = eval_rng(seed, 1)
                train_z = res.learner.encode(datastore.sample_contexts(
                    train_ds, train_ds.task_ids, cfg.context_training_size, rng).features)
                row["disagreement_train"] = mixer.disagreement_on(train_ds, train_z, rng)
                row["disagreement_heldout"] = mixer.disagreement_on(test_ds, ev.latents, rng, task_ids=ev.task_ids)
            rows.append(row)
    if out_dir is not None:
        write_csv(Path(out_dir) / "taskood.csv", TASKOOD_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------- embeddings

def embedding_rows(encode, test_ds, checkpoints, contexts_per_task, rng, modes=("IID", "OOD")) -> list:
    """(task_id, origin, z...) for IID and OOD contexts of every test task."""
    n = test_ds.tasks[0].horizon
    rows = []
    for mode in modes:
        tids = np.repeat(test_ds.task_ids, contexts_per_task)
        if mode == "IID":
            ctx = datastore.sample_contexts(test_ds, tids, n, rng)
        elif mode == "OOD":
            picks = np.concatenate([rng.choice(len(checkpoints), size=contexts_per_task,
                                               replace=contexts_per_task > len(checkpoints))
                                    for _ in test_ds.task_ids])
            ctx = datastore.ood_contexts(test_ds, tids, picks, n, rng, checkpoints)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        z = encode(ctx.features, ctx.task_ids)
        for t, o, zi in zip(ctx.task_ids, ctx.origins, z):
            rows.append([int(t), o, *[float(v) for v in zi]])
    return rows


def export_embeddings(encode, test_ds, checkpoints, path, contexts_per_task=10, seed=0, modes=("IID", "OOD")) -> str:
    """Write task_id,origin,z1..zd rows; ``encode(feats, task_ids)`` returns latents."""
    rows = embedding_rows(encode, test_ds, checkpoints, contexts_per_task, np.random.default_rng(seed), modes)
    d = len(rows[0]) - 2 if rows else 0
    header = ("task_id", "origin", *[f"z{i + 1}" for i in range(d)])
    return write_csv(path, header, rows)


# ---------------------------------------------------------------- spurious fraction

SPURIOUS_COLUMNS = ("loss", "seed", "spurious_fraction", "i_zx", "i_zxb", "i_zxt_given_xb", "i_zm", "undersampled")


def run_spurious_probe(cfg: ExperimentConfig, losses=("FOCAL", "UNICORN-SS"), out_dir=None, n_bins=16) -> list:
    """Plug-in I(Z;Xb)/I(Z;X) of each method's encoder on held-out GridGoal contexts, paired by seed."""
    from .. import mioracle

    if cfg.family != "GridGoal":
        raise ConfigError("the spurious-fraction probe needs the enumerable GridGoal family")
    rows = []
    for seed in cfg.seeds:
        train_ds, test_ds = build_datasets(cfg, seed)
        for loss in losses:
            learner = make_learner(cfg, train_ds, seed, loss)
            meta_train(learner, train_ds, cfg.training_steps, np.random.default_rng(_derived_seed(seed, 4)))
            g = mioracle.empirical_mi_gap(learner.rep.encoder, test_ds, n_bins=n_bins, seed=seed)
            rows.append({"loss": loss, "seed": seed, "spurious_fraction": g.spurious_fraction, "i_zx": g.i_zx,
                         "i_zxb": g.i_zxb, "i_zxt_given_xb": g.i_zxt_given_xb, "i_zm": g.i_zm,
                         "undersampled": int(g.undersampled)})
    if out_dir is not None:
        write_csv(Path(out_dir) / "spurious.csv", SPURIOUS_COLUMNS, rows)
    return rows
