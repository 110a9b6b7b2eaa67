"""Command-line entry point: ``comrl <subcommand> --config cfg.json --out dir``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import mioracle
from ..diffcore import NumericalError
from ..offlinerl import NumericalAbort
from . import pipeline
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed expects a comma-separated integer list, got {text!r}") from None


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None):
        changes["seeds"] = args.seed
    if getattr(args, "loss", None):
        changes["loss"] = args.loss
    return cfg.replace(**changes) if changes else cfg


def cmd_collect(args):
    for p in pipeline.collect(_config(args), args.out):
        print(p)


def cmd_train(args):
    cfg = _config(args)
    run = pipeline.run_pipeline(cfg, args.out)
    print(f"{cfg.loss}: IID {run.final_mean('iid_mean'):.3f}  OOD {run.final_mean('ood_mean'):.3f}")


def cmd_eval(args):
    for r in pipeline.run_eval(_config(args), args.out):
        print(f"seed {r['seed']}: IID {r['iid_mean']:.3f}  OOD {r['ood_mean']:.3f}")


def cmd_sweep_quality(args):
    cfg = _config(args)
    for r in pipeline.run_quality_sweep(cfg, args.tiers.split(",") if args.tiers else None, args.out):
        print(f"{r['tier']:>7} seed {r['seed']}: IID {r['iid_mean']:.3f}  random-z {r['random_z_mean']:.3f}")


def cmd_sweep_alpha(args):
    cfg = _config(args)
    rows = pipeline.run_alpha_sweep(cfg, None, args.out)
    for k, v in pipeline.alpha_means(rows).items():
        print(f"{k:>8}: OOD {v:.3f}")


def cmd_taskood(args):
    for r in pipeline.run_taskood_modelbased(_config(args), args.out):
        print(f"{r['variant']:>12} seed {r['seed']}: held-out {r['heldout_mean']:.3f}")


def cmd_spurious(args):
    rows = pipeline.run_spurious_probe(_config(args), out_dir=args.out)
    for r in rows:
        print(f"{r['loss']:>12} seed {r['seed']}: I(Z;Xb)/I(Z;X) {r['spurious_fraction']:.4f}")


def cmd_export(args):
    cfg = _config(args)
    for seed in cfg.seeds:
        learner, train_ds, test_ds = pipeline.load_learner(cfg, args.out, seed)
        path = Path(args.out) / f"embeddings_seed{seed}.csv"
        pipeline.export_embeddings(lambda f, t: learner.encode(f), test_ds, train_ds.checkpoints, path,
                                   args.contexts, seed)
        print(path)


def run_oracle_suite(out_dir, seed=0, n_joints=500, n_models=500, trials=10_000) -> dict:
    """Identity, bound and concentration checks; writes oracle.csv and concentration.csv."""
    rng = np.random.default_rng(seed)
    rows = []
    worst = max(abs(mioracle.decomposition_residual(mioracle.random_joint(rng))) for _ in range(n_joints))
    rows.append(mioracle.CheckRow("decomposition_residual_max", worst, 0.0, worst, worst < mioracle.TOL))
    failures = 0
    for _ in range(n_models):
        sizes = tuple(int(v) for v in rng.integers(2, 7, size=4))
        rep = mioracle.verify_markov_bounds(mioracle.COMRLGenerativeModel.random(rng, sizes))
        failures += not rep.passed
    rows.append(mioracle.CheckRow("markov_bounds_failures", float(failures), 0.0, float(failures), failures == 0))
    try:
        mioracle.verify_markov_bounds(mioracle.random_joint(rng))
        rejected = False
    except mioracle.MarkovViolation:
        rejected = True
    rows.append(mioracle.CheckRow("non_markov_rejected", float(rejected), 1.0, 0.0, rejected))
    model = mioracle.GaussianTaskModel.random(200, 5, rng, delta=0.1)
    conc = mioracle.theorem2_experiment(model, (5, 20, 80), trials, seed)
    for c in conc:
        rows.append(mioracle.CheckRow(f"coverage_n{c.n_m}", c.frequency, 1 - model.delta,
                                      c.frequency - (1 - model.delta), c.frequency >= 1 - model.delta))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.csv").write_text(mioracle.rows_to_csv(rows))
    pipeline.write_csv(out / "concentration.csv", ("n_m", "bound", "frequency", "q25", "median", "q75"),
                       [c.__dict__ for c in conc])
    return {"rows": rows, "concentration": conc}


def cmd_oracle(args):
    seed = args.seed[0] if args.seed else 0
    res = run_oracle_suite(args.out, seed)
    for r in res["rows"]:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.check}: {r.lhs:.6g}")
    if not all(r.passed for r in res["rows"]):
        return 1
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comrl", description="Context-based offline meta-RL laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=str, default=None, help="JSON experiment config")
        sp.add_argument("--seed", type=_seeds, default=None, help="comma-separated seeds (overrides config)")
        sp.add_argument("--out", type=str, required=True, help="output directory")
        sp.add_argument("--loss", type=str, default=None, help="loss selector (overrides config)")
        sp.set_defaults(fn=fn)
        return sp

    add("collect", cmd_collect, "collect and save offline datasets")
    add("train", cmd_train, "meta-train and evaluate (IID and OOD)")
    add("eval", cmd_eval, "re-evaluate saved checkpoints")
    add("sweep-quality", cmd_sweep_quality, "random / medium / expert tier comparison").add_argument(
        "--tiers", type=str, default=None)
    add("sweep-alpha", cmd_sweep_alpha, "alpha/(1-alpha) sweep including the FOCAL-only endpoint")
    add("taskood", cmd_taskood, "task-OOD split: model-based vs context-only")
    add("probe-spurious", cmd_spurious, "plug-in spurious fraction of FOCAL vs UNICORN-SS encoders (GridGoal)")
    add("oracle", cmd_oracle, "exact information-theoretic checks")
    add("export-embeddings", cmd_export, "write task latents for IID and OOD contexts").add_argument(
        "--contexts", type=int, default=10)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
