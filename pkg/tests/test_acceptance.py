"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from comrl_lab import diffcore as dc, envgen, mioracle
from comrl_lab.datastore import sample_contexts
from comrl_lab.harness import ExperimentConfig, cli, pipeline
from comrl_lab.offlinerl import Agent, BRACConfig, MetaLearner, TrainConfig, actor_loss, critic_loss, meta_train
from comrl_lab.replearn import (EncoderConfig, LossWeights, RepresentationModel, cross_entropy, focal_loss,
                                infonce_from_logits, kl_penalty)

SEEDS = [0, 1, 2, 3, 4, 5]


@pytest.fixture
def report(pytestconfig):
    """Print one PASS/FAIL line straight to the terminal, then assert."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


# ------------------------------------------------------------------ 1 gradients

REP_LOSSES = ("FOCAL", "CORRO", "CSRO", "UNICORN-SUP", "UNICORN-SS")


def _rep_case(sel, seed):
    r = np.random.default_rng(seed)
    ds = envgen.collect_dataset(envgen.make_tasks("PointDir", 3, seed), ("random", "expert"), 1, seed=seed)
    enc = EncoderConfig(embed_widths=(4,), latent_dim=2)
    model = RepresentationModel(sel, ds.feature_dim, 2, 2, 3, enc, hidden=4, seed=seed)
    labels = np.tile(np.arange(3), 2)
    feats = sample_contexts(ds, np.array(ds.task_ids)[labels], int(r.integers(3, 7)), r).features
    task_params = envgen.param_matrix(ds.tasks)

    def f():
        return model.loss(feats, labels, task_params, "PointDir", np.random.default_rng(seed), 2, 2, recon_rows=8)[0]

    nets = model.networks()
    params = [p for k in nets for p in nets[k].parameters()]
    return f, _off_kinks(params, r)


def _off_kinks(params, r):
    # zero-initialised biases put dead-input ReLUs exactly on the kink, where no derivative exists
    for p in params:
        if p.data.ndim == 1:
            p.data += 0.1 * r.normal(size=p.data.shape)
    return params


def _rl_case(kind, seed):
    r = np.random.default_rng(seed)
    agent = Agent(2, 2, 2, width=4, depth=1, seed=seed)
    n = int(r.integers(2, 9))
    b = {"obs": r.normal(size=(n, 2)), "act": r.uniform(-1, 1, (n, 2)), "rew": r.normal(size=n),
         "next_obs": r.normal(size=(n, 2)), "done": (r.random(n) < 0.2).astype(float)}
    z = r.normal(size=(n, 2))
    if kind == "critic":
        return lambda: critic_loss(agent, b, z, BRACConfig(gamma=0.9)), _off_kinks(agent.critic.parameters(), r)
    cfg = BRACConfig(bc_weight=float(r.uniform(0.1, 2)))
    return lambda: actor_loss(agent, b, z, cfg), _off_kinks(agent.actor.parameters(), r)


def test_c01_gradient_exactness(report):
    t0 = time.perf_counter()
    worst, count, failed = 0.0, 0, []
    for name in (*REP_LOSSES, "critic", "actor"):
        for seed in range(15):
            f, params = _rl_case(name, seed) if name in ("critic", "actor") else _rep_case(name, seed)
            res = dc.grad_check(f, params, tol=1e-4)
            worst = max(worst, res["max_error"])
            count += 1
            if not res["passed"]:
                failed.append((name, seed))
    secs = time.perf_counter() - t0
    report(1, not failed and count >= 100 and secs < 60,
           f"{count} (loss, seed, batch) cases, worst rel err {worst:.2e}, failures {failed}, {secs:.1f}s")


# ------------------------------------------------------------------ 2-4 information oracles

def test_c02_decomposition_identity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        sizes = tuple(int(v) for v in rng.integers(2, 6, size=4))
        worst = max(worst, abs(mioracle.decomposition_residual(mioracle.random_joint(rng, sizes))))
    secs = time.perf_counter() - t0
    report(2, worst < 1e-10 and secs < 5, f"max |I(Z;X) - I(Z;Xt|Xb) - I(Z;Xb)| = {worst:.2e} over 500 joints, "
                                          f"{secs:.2f}s")


def test_c03_markov_bounds(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    fails = 0
    for _ in range(500):
        sizes = tuple(int(v) for v in rng.integers(2, 7, size=4))
        fails += not mioracle.verify_markov_bounds(mioracle.COMRLGenerativeModel.random(rng, sizes)).passed
    try:
        mioracle.verify_markov_bounds(mioracle.random_joint(rng))
        rejected = False
    except mioracle.MarkovViolation:
        rejected = True
    secs = time.perf_counter() - t0
    report(3, fails == 0 and rejected and secs < 10,
           f"{500 - fails}/500 models pass (a)-(e), non-Markov joint rejected={rejected}, {secs:.2f}s")


def test_c04_concentration(report):
    t0 = time.perf_counter()
    model = mioracle.GaussianTaskModel.random(200, 5, np.random.default_rng(2), delta=0.1)
    rows = mioracle.theorem2_experiment(model, (5, 20, 80), 10_000, seed=0)
    secs = time.perf_counter() - t0
    freqs = {r.n_m: r.frequency for r in rows}
    med = {r.n_m: r.median for r in rows}
    ok = all(f >= 0.9 for f in freqs.values()) and med[80] < med[5] and secs < 60
    report(4, ok, f"coverage {freqs}, median error n=5 {med[5]:.4g} > n=80 {med[80]:.4g}, {secs:.2f}s")


# ------------------------------------------------------------------ 5 hand values

def test_c05_hand_values(report):
    w = LossWeights(focal_beta=1.0, focal_exponent=2.0, focal_eps=0.1)
    focal = focal_loss(dc.constant(np.array([[0.0, 0.0], [1.0, 0.0]])), [0, 1], w).item()
    ce = cross_entropy(dc.constant(np.zeros((3, 4))), [0, 1, 3]).item()
    k = 7
    nce = infonce_from_logits(dc.constant(np.full((5, k + 1), 0.3))).item()
    kl = kl_penalty(dc.constant(np.array([[1.0, 0.0]])), dc.constant(np.zeros((1, 2)))).item()
    errs = {"focal": abs(focal - 1 / 1.1), "ce": abs(ce - math.log(4)), "infonce": abs(nce - math.log(k + 1)),
            "kl": abs(kl - 0.5)}
    report(5, max(errs.values()) <= 1e-10, "abs errors " + ", ".join(f"{a} {e:.1e}" for a, e in errs.items()))


# ------------------------------------------------------------------ 6-7 small training runs

def _pair_distance_ratio(z, labels):
    d = np.linalg.norm(z[:, None] - z[None], axis=2)
    same = labels[:, None] == labels[None]
    off = ~np.eye(len(z), dtype=bool)
    return d[same & off].mean() / d[~same].mean()


def test_c06_focal_clusters(report):
    t0 = time.perf_counter()
    tasks = [envgen.TaskSpec("PointDir", 0, (0.5,)), envgen.TaskSpec("PointDir", 1, (3.5,))]
    ds = envgen.collect_dataset(tasks, envgen.TIERS, 5, seed=0)
    learner = MetaLearner("FOCAL", ds, TrainConfig(task_batch=2, contexts_per_task=4, seed=0))
    rng = np.random.default_rng(0)
    ctx = sample_contexts(ds, np.repeat(ds.task_ids, 30), 50, np.random.default_rng(9))
    before = _pair_distance_ratio(learner.encode(ctx.features), ctx.task_ids)
    meta_train(learner, ds, 200, rng)
    ratio = _pair_distance_ratio(learner.encode(ctx.features), ctx.task_ids)
    secs = time.perf_counter() - t0
    report(6, ratio < 0.5 and secs < 60, f"intra/inter distance ratio {before:.3f} -> {ratio:.3f} after 200 steps, "
                                         f"{secs:.1f}s")


def test_c07_sup_accuracy(report):
    t0 = time.perf_counter()
    tasks = [envgen.TaskSpec("GridGoal", i, (float(g),)) for i, g in enumerate((4, 12, 20, 24))]
    # random-tier GridGoal contexts are often reward-free and carry no task signal, so they are left out
    tiers = ("medium", "expert")
    train = envgen.collect_dataset(tasks, tiers, 5, seed=0)
    held = envgen.collect_dataset(tasks, tiers, 5, seed=1)
    learner = MetaLearner("UNICORN-SUP", train, TrainConfig(task_batch=4, contexts_per_task=4, seed=0))
    meta_train(learner, train, 2000, np.random.default_rng(0))
    ctx = sample_contexts(held, np.repeat(held.task_ids, 50), 50, np.random.default_rng(3))
    logits = learner.rep.classifier.forward_np(learner.encode(ctx.features))
    labels = np.searchsorted(held.task_ids, ctx.task_ids)
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    secs = time.perf_counter() - t0
    report(7, acc > 0.9 and secs < 120, f"held-out context accuracy {acc:.3f} after 2000 steps, {secs:.1f}s")


# ------------------------------------------------------------------ 8 and 10 PointDir comparisons

POINTDIR = ExperimentConfig(family="PointDir", seeds=SEEDS, training_steps=20000, eval_interval=20000,
                            eval_contexts_per_task=5)


@pytest.fixture(scope="module")
def pointdir_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("pointdir")
    t0 = time.perf_counter()
    runs = {loss: pipeline.run_pipeline(POINTDIR, out / loss, loss=loss)
            for loss in ("FOCAL", "UNICORN-SS", "UNICORN-SS-0")}
    return runs, time.perf_counter() - t0


def test_c08_ood_orderings(report, pointdir_runs):
    runs, secs = pointdir_runs
    iid = {k: r.final_mean("iid_mean") for k, r in runs.items()}
    ood = {k: r.final_mean("ood_mean") for k, r in runs.items()}
    i = all(ood[k] <= iid[k] for k in runs)
    ii = ood["UNICORN-SS"] >= ood["FOCAL"]
    iii = ood["UNICORN-SS"] >= ood["UNICORN-SS-0"]
    detail = ", ".join(f"{k} IID {iid[k]:.2f} OOD {ood[k]:.2f}" for k in runs)
    report(8, i and ii and iii and secs < 1800,
           f"{detail}; (i) {i} (ii) {ii} (iii) {iii}; {secs / 60:.1f} min")


def test_c10_alpha_sweep_interior(report, pointdir_runs):
    runs, shared = pointdir_runs
    labels = {"FOCAL": "FOCAL", "UNICORN-SS": "0.15", "UNICORN-SS-0": "0"}
    known = {(labels[k], s.seed): s.final for k, r in runs.items() for s in r.seeds}
    t0 = time.perf_counter()
    rows = pipeline.run_alpha_sweep(POINTDIR, [0.0, 0.15, 1.5, "FOCAL"], known=known)
    secs = shared + time.perf_counter() - t0
    means = pipeline.alpha_means(rows)
    best = max(means, key=means.get)
    report(10, best in ("0.15", "1.5") and secs < 2700,
           "mean OOD " + ", ".join(f"{k} {v:.2f}" for k, v in means.items()) + f"; best {best}; {secs / 60:.1f} min "
           "(0, 0.15 and FOCAL points shared with criterion 8)")


# ------------------------------------------------------------------ 9 spurious fraction

def test_c09_spurious_fraction(report):
    cfg = ExperimentConfig(family="GridGoal", n_train_tasks=16, n_test_tasks=8, seeds=SEEDS, training_steps=3000,
                           eval_interval=3000)
    t0 = time.perf_counter()
    rows = pipeline.run_spurious_probe(cfg)
    secs = time.perf_counter() - t0
    frac = {(r["loss"], r["seed"]): r["spurious_fraction"] for r in rows}
    diff = [frac["FOCAL", s] - frac["UNICORN-SS", s] for s in SEEDS]
    f_mean = np.mean([frac["FOCAL", s] for s in SEEDS])
    s_mean = np.mean([frac["UNICORN-SS", s] for s in SEEDS])
    report(9, f_mean >= s_mean and secs < 600,
           f"I(Z;Xb)/I(Z;X) FOCAL {f_mean:.4f} vs UNICORN-SS {s_mean:.4f}, paired wins "
           f"{sum(d >= 0 for d in diff)}/6, {secs / 60:.1f} min")


# ------------------------------------------------------------------ 11 task-OOD

def test_c11_taskood_model_based(report):
    cfg = ExperimentConfig(family="PointDir", seeds=SEEDS, training_steps=20000, eval_interval=20000,
                           eval_contexts_per_task=5)
    t0 = time.perf_counter()
    rows = pipeline.run_taskood_modelbased(cfg)
    secs = time.perf_counter() - t0
    mean = {v: np.mean([r["heldout_mean"] for r in rows if r["variant"] == v]) for v in ("context-only",
                                                                                           "model-based")}
    report(11, mean["model-based"] > mean["context-only"] and secs < 2700,
           f"held-out return model-based {mean['model-based']:.2f} vs context-only {mean['context-only']:.2f}, "
           f"{secs / 60:.1f} min")


# ------------------------------------------------------------------ 12 reproducibility

def test_c12_cli_reproducible(report, tmp_path):
    cfg = ExperimentConfig(family="PointVel", n_train_tasks=6, n_test_tasks=3, seeds=[0, 1], training_steps=300,
                           eval_interval=100, loss="CSRO")
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["train", "--config", str(path), "--out", str(o)]) for o in outs]
    names = ["metrics.csv", "checkpoints/seed0.cmrlw", "checkpoints/seed1.cmrlw"]
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names}
    report(12, codes == [0, 0] and all(same.values()), f"exit codes {codes}, byte-identical {same}")
