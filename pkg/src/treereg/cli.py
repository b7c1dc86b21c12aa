"""Command-line entry point.

Subcommands: ``simulate``, ``train``, ``eval``, ``sweep``, ``check-theory``
and ``run`` (named experiment recipes). All accept explicit seeds and output
paths; every command is deterministic given its flags.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys

from . import experiments, fileio, metrics, simulator, trainer, verification
from .env_tree import parse_edge_list_text
from .simulator import SimConfig


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="generate a multi-environment dataset")
    p.add_argument("--depth", type=int, default=None,
                   help="tree depth (default 7; 8 with --leaves-only)")
    p.add_argument("--s", type=int, default=1, help="non-zero entries per mutation row")
    p.add_argument("--bernoulli-pi", type=float, default=None,
                   help="Bernoulli support probability (overrides --s)")
    p.add_argument("--n-per-env", type=int, default=3000)
    p.add_argument("--d-x", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--delta-variance", type=float, default=0.25)
    p.add_argument("--z-noise-variance", type=float, default=0.01)
    p.add_argument("--y-noise-variance", type=float, default=0.01)
    p.add_argument("--leaves-only", action="store_true")
    p.add_argument("--linear-psi", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tree-file", default=None,
                   help="edge-list file to use instead of a balanced binary tree")
    p.add_argument("--out", required=True, help="dataset output path")
    p.add_argument("--truth-out", default=None, help="ground-truth JSON output path")
    return p


def _cmd_simulate(args) -> int:
    tree = None
    depth = args.depth
    if args.tree_file:
        with open(args.tree_file, "r", encoding="utf-8") as fh:
            tree = parse_edge_list_text(fh.read())
        depth = tree.depth
    config = SimConfig(
        depth=depth, n_per_env=args.n_per_env, d_x=args.d_x, k=args.k,
        s_sparsity=0 if args.bernoulli_pi is not None else args.s,
        delta_variance=args.delta_variance,
        z_noise_variance=args.z_noise_variance,
        y_noise_variance=args.y_noise_variance,
        observe_leaves_only=args.leaves_only, linear_psi=args.linear_psi,
        bernoulli_pi=args.bernoulli_pi, seed=args.seed,
    )
    if tree is None:
        tree = simulator.default_tree(config)
    truth = simulator.sample_ground_truth(tree, config)
    dataset = simulator.generate_dataset(tree, truth)
    fileio.save_dataset(args.out, dataset, tree)
    if args.truth_out:
        simulator.save_ground_truth(args.truth_out, truth)
    print(f"wrote {args.out}: {dataset.n_samples} samples, "
          f"{len(dataset.observed_envs)} environments")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=("tbr", "baseline"), default="tbr")
    p.add_argument("--config", default=None, help="JSON file mirroring the train config")
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--k-hat", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report", default=None, help="training report JSON path")
    p.add_argument("--csv", default=None, help="append an evaluation row here")
    return p


def _train_config_from_args(args) -> trainer.TrainConfig:
    base = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    base.setdefault("model_kind", args.model)
    base.setdefault("seed", args.seed)
    if args.lam is not None:
        base["lam"] = args.lam
    if args.lr is not None:
        base["learning_rate"] = args.lr
    if args.batch_size is not None:
        base["batch_size"] = args.batch_size
    if args.max_epochs is not None:
        base["max_epochs"] = args.max_epochs
    if args.k_hat is not None:
        base["k_hat"] = args.k_hat
    return trainer.TrainConfig.from_json_dict(base)


def _run_id_for(dataset_path: str, config: trainer.TrainConfig) -> str:
    with open(dataset_path, "rb") as fh:
        digest = hashlib.sha256(fh.read())
    digest.update(json.dumps(config.to_json_dict(), sort_keys=True).encode())
    return f"train:{digest.hexdigest()[:16]}"


def _cmd_train(args) -> int:
    dataset, tree = fileio.load_dataset(args.dataset)
    config = _train_config_from_args(args)
    report = trainer.train(dataset, tree, config)
    run_id = _run_id_for(args.dataset, config)
    fileio.save_checkpoint(args.out, report.params, tree, config.lam,
                           meta={"run_id": run_id,
                                 "train_config": config.to_json_dict(),
                                 "selected_epoch": report.selected_epoch})
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump({
                "run_id": run_id,
                "train_config": config.to_json_dict(),
                "selected_epoch": report.selected_epoch,
                "train_losses": report.train_losses,
                "val_losses": report.val_losses,
                "wall_clock_seconds": report.wall_clock_seconds,
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.csv:
        row = experiments.evaluate_run(
            report.params, dataset, tree, run_id, config.seed,
            _dataset_s_label(dataset.config), config.model_kind)
        metrics.append_eval_reports(args.csv, [row])
    print(f"wrote {args.out} (selected epoch {report.selected_epoch}, "
          f"val MSE {report.selected_val_loss:.6g})")
    return 0


def _dataset_s_label(config: SimConfig) -> float:
    return config.bernoulli_pi if config.bernoulli_pi is not None else config.s_sparsity


def _add_eval(sub):
    p = sub.add_parser("eval", help="re-evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="evaluation seed (defaults to the training seed)")
    return p


def _cmd_eval(args) -> int:
    dataset, tree = fileio.load_dataset(args.dataset)
    params, header = fileio.load_checkpoint(args.checkpoint)
    if header["tree_hash"] != tree.structure_hash():
        raise SystemExit("checkpoint was trained on a different tree")
    meta = header.get("meta", {})
    run_id = meta.get("run_id", "eval")
    seed = args.seed
    if seed is None:
        seed = meta.get("train_config", {}).get("seed", 0)
    model = header["model_kind"]
    row = experiments.evaluate_run(params, dataset, tree, run_id, seed,
                                   _dataset_s_label(dataset.config), model)
    metrics.append_eval_reports(args.csv, [row])
    print(f"appended evaluation of {args.checkpoint} to {args.csv}")
    return 0


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="grid search over training configs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", required=True,
                   help="JSON file: list of train-config objects")
    p.add_argument("--out", required=True, help="best checkpoint output path")
    p.add_argument("--table", default=None, help="sweep table JSON path")
    return p


def _cmd_sweep(args) -> int:
    dataset, tree = fileio.load_dataset(args.dataset)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = [trainer.TrainConfig.from_json_dict(d) for d in json.load(fh)]
    result = trainer.sweep(dataset, tree, grid)
    best_cfg = result.best.config
    fileio.save_checkpoint(args.out, result.best.params, tree, best_cfg.lam,
                           meta={"train_config": best_cfg.to_json_dict(),
                                 "selected_epoch": result.best.selected_epoch})
    if args.table:
        with open(args.table, "w", encoding="utf-8") as fh:
            json.dump(result.table, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"best config: lam={best_cfg.lam}, lr={best_cfg.learning_rate}, "
          f"val MSE {result.best.selected_val_loss:.6g}")
    return 0


def _add_check_theory(sub):
    p = sub.add_parser("check-theory",
                       help="run the randomized property battery")
    p.add_argument("--trials", type=int, default=200,
                   help="sparsity-preservation trials")
    p.add_argument("--matrices", type=int, default=500,
                   help="invertible matrices for the permutation check")
    p.add_argument("--gradient-draws", type=int, default=100)
    p.add_argument("--mcc-instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON report path")
    return p


def _cmd_check_theory(args) -> int:
    report = verification.run_property_battery(
        seed=args.seed, trials=args.trials, matrices=args.matrices,
        gradient_draws=args.gradient_draws, mcc_instances=args.mcc_instances)
    for check in report.checks:
        status = "ok" if check["passed"] else "FAILED"
        print(f"{check['name']}: {status}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"passed": report.passed, "checks": report.checks},
                      fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    return 0 if report.passed else 1


def _add_run(sub):
    p = sub.add_parser("run", help="run a named experiment recipe")
    p.add_argument("--recipe", required=True, choices=experiments.RECIPES)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated seed list")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--models", default="tbr,baseline")
    p.add_argument("--s-values", default=None,
                   help="comma-separated sparsity levels (recipe default otherwise)")
    p.add_argument("--sim-override", action="append", default=[],
                   metavar="KEY=VALUE", help="simulator config override")
    p.add_argument("--train-override", action="append", default=[],
                   metavar="KEY=VALUE", help="train config override")
    return p


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"override {pair!r} must be KEY=VALUE")
        key, value = pair.split("=", 1)
        out[key] = json.loads(value) if value not in ("true", "false") else value == "true"
    return out


def _cmd_run(args) -> int:
    s_values = None
    if args.s_values:
        parsed = [float(v) for v in args.s_values.split(",")]
        s_values = tuple(int(v) if v == int(v) else v for v in parsed)
    spec = experiments.ExperimentSpec(
        recipe=args.recipe,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        out_dir=args.out_dir,
        scale=args.scale,
        models=tuple(args.models.split(",")),
        s_values=s_values,
        workers=args.workers,
        sim_overrides=_parse_overrides(args.sim_override),
        train_overrides=_parse_overrides(args.train_override),
    )
    result = experiments.run_recipe(spec)
    print(f"wrote {result.csv_path} and {result.summary_path}")
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed; see summary")
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="treereg",
        description="Multi-environment representation learning with "
                    "tree-structured sparsity regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_sweep(sub)
    _add_check_theory(sub)
    _add_run(sub)
    args = parser.parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "sweep": _cmd_sweep,
        "check-theory": _cmd_check_theory,
        "run": _cmd_run,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
