"""Command-line entry point.

Subcommands: gen, train, eval, adapt, traverse, identcheck. All randomness
flows from the seeds in the config via named streams; every output file
embeds the config hash. Exit codes: 0 success, 1 user error, 2 numerical
failure. The env var DISENTANGO_THREADS caps data-generation workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, datagen, trainer as trainer_mod
from .analysis import (AnalysisError, GaussianQFamily, check_linear_independence,
                       latent_table_from_model, latent_traversal, mcc, mi_score,
                       supervised_latent_error, write_latent_table,
                       write_metrics, write_mi_matrix, write_traversal)
from .config import ConfigError, hash_config, load_config
from .datagen import (DatagenError, GeneratorSpec, Grid, build_dataset,
                      load_dataset, save_dataset)
from .losses import Hyperparams, LossError
from .model import ModelError, ModelState, load_checkpoint
from .seeding import split_stream
from .trainer import (NonFiniteLoss, OptimizerConfig, TrainConfig, TrainError,
                      Trainer, adapt, evaluate, write_report)

USER_ERRORS = (ConfigError, DatagenError, LossError, ModelError, AnalysisError,
               TrainError, FileNotFoundError, OSError)


def _spec_from_cfg(cfg: dict) -> GeneratorSpec:
    d = cfg["data"]
    return GeneratorSpec(
        d_z=d["d_z"], m_kind=d["m_kind"], num_tasks=d["num_tasks"],
        n_train=d["n_train"], grid=Grid(tuple(d["grid"])), n_eval=d["n_eval"],
        grf_exponent=d["grf_exponent"], seed=d["seed"],
        with_labels=d["with_labels"], with_b=d["with_b"],
        for_identifiability=d["for_identifiability"])


def _model_from_cfg(cfg: dict, manifest: dict,
                    rng: np.random.Generator) -> ModelState:
    m = cfg["model"]
    grid = tuple(manifest["spec"]["grid_extents"])
    num_classes = m["num_classes"]
    if cfg["loss"]["scenario"] == "SC2" and num_classes == 0:
        num_classes = datagen.NUM_CLASS_LABELS
    return ModelState(manifest["spec"]["num_tasks"], grid, m["d_z"],
                      m["channels"], tuple(m["modes"]), m["depth"],
                      m["enc_hidden"], m["dec_hidden"], num_classes, rng)


def _train_cfg(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    opt = OptimizerConfig(lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
                          eps=t["eps"], lr_decay=t["lr_decay"])
    return TrainConfig(mode=t["mode"], epochs=t["epochs"], patience=t["patience"],
                       task_batch=t["task_batch"], seed=t["seed"], optimizer=opt,
                       stats_momentum=t["stats_momentum"])


def _hp(cfg: dict) -> Hyperparams:
    loss = cfg["loss"]
    return Hyperparams(beta_d=loss["beta_d"], beta_kl=loss["beta_kl"],
                       beta_cls=loss["beta_cls"], scenario=loss["scenario"],
                       kl_form=loss["kl_form"])


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = _spec_from_cfg(cfg)
    tasks, manifest = build_dataset(spec)
    path = cfg["data"]["path"]
    save_dataset(path, tasks, manifest)
    max_residual = max(datagen.pde_residual(t.b_field, u, f, spec.grid)
                       for t in tasks for f, u in t.pairs)
    summary = {
        "path": path, "num_tasks": len(tasks),
        "pairs_per_task": len(tasks[0].pairs),
        "max_residual": max_residual,
        "config_hash": hash_config(cfg),
    }
    with open(path + ".json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    tasks, manifest = load_dataset(cfg["data"]["path"])
    model = _model_from_cfg(cfg, manifest, split_stream(cfg["train"]["seed"], "init"))
    tr = Trainer(model, tasks, manifest, _hp(cfg), _train_cfg(cfg), run_config=cfg)
    outdir = cfg["run"]["outdir"]
    os.makedirs(outdir, exist_ok=True)
    ckpt = os.path.join(outdir, "model.ckpt")
    report = tr.train(checkpoint_path=ckpt)
    tr.save(os.path.join(outdir, "model_last.ckpt"))
    write_report(outdir, report)
    print(f"mode={report.mode} epochs={len(report.epochs)} "
          f"final_val_rel_l2={report.final_val_rel_l2:.6f} "
          f"config_hash={report.config_hash}")
    return 0


def _load_model(path: str):
    model, run_config, _, _, extra = load_checkpoint(path)
    return model, run_config, extra


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    tasks, manifest = load_dataset(cfg["data"]["path"])
    model, _, _ = _load_model(args.checkpoint)
    indices = manifest["splits"][args.split]
    n_train = manifest["spec"]["n_train"]
    n_eval = manifest["spec"]["n_eval"]
    sl = slice(n_train, n_train + n_eval) if args.pairs == "eval" and n_eval > 0 \
        else slice(0, n_train)
    metrics = evaluate(model, tasks, indices, sl, mode=args.mode)
    metrics["config_hash"] = hash_config(cfg)
    outdir = cfg["run"]["outdir"]
    os.makedirs(outdir, exist_ok=True)
    write_metrics(os.path.join(outdir, f"eval_{args.split}.json"), metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config, args.set)
    tasks, manifest = load_dataset(cfg["data"]["path"])
    model, _, _ = _load_model(args.checkpoint)
    grid = Grid(tuple(manifest["spec"]["grid_extents"]))
    indices = manifest["splits"][args.split]
    n_train = manifest["spec"]["n_train"]
    n_eval = manifest["spec"]["n_eval"]
    opt = OptimizerConfig(lr=args.lr, lr_decay=1.0)
    trace = adapt(model, tasks, indices, n_train, args.steps, opt, grid)
    sl = slice(n_train, n_train + n_eval) if n_eval > 0 else slice(0, n_train)
    metrics = evaluate(model, tasks, indices, sl, mode="metano")
    metrics["adapt_loss_first"] = trace[0]
    metrics["adapt_loss_last"] = trace[-1]
    if manifest["spec"]["with_b"]:
        table = latent_table_from_model(model, tasks, indices)
        table.z_true = np.stack([tasks[i].b_vector for i in indices])
        metrics["supervised_latent_error_pct"] = supervised_latent_error(table)
    metrics["config_hash"] = hash_config(cfg)
    outdir = cfg["run"]["outdir"]
    os.makedirs(outdir, exist_ok=True)
    write_metrics(os.path.join(outdir, f"adapt_{args.split}.json"), metrics)
    model_path = os.path.join(outdir, "model_adapted.ckpt")
    from .model import save_checkpoint
    save_checkpoint(model_path, model, cfg, extra={"adapted_split": args.split})
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_traverse(args) -> int:
    cfg = load_config(args.config, args.set)
    tasks, manifest = load_dataset(cfg["data"]["path"])
    model, _, _ = _load_model(args.checkpoint)
    dims = [int(d) for d in args.dims.split(",") if d.strip()]
    probe = tasks[args.task].pairs[0][0]
    grid = latent_traversal(model, args.task, dims, args.lo, args.hi,
                            args.steps, probe)
    outdir = os.path.join(cfg["run"]["outdir"], "traversal")
    write_traversal(outdir, grid)
    with open(os.path.join(outdir, "config_hash.txt"), "w") as fh:
        fh.write(hash_config(cfg) + "\n")
    print(f"wrote {len(grid.z_points)} traversal points to {outdir}")
    return 0


def cmd_identcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    satisfied = 0
    last = None
    for _ in range(args.trials):
        fam = GaussianQFamily.random(args.d_z, args.d_b, rng,
                                     mean_only=args.mean_only)
        b_set = [rng.standard_normal(args.d_b)
                 for _ in range(2 * args.d_z + 1)]
        last = check_linear_independence(b_set, fam, rng=rng)
        satisfied += int(last["satisfied"])
    out = {"trials": args.trials, "satisfied_fraction": satisfied / args.trials,
           "last_rank": last["rank"], "required_rank": 2 * args.d_z,
           "mean_only": args.mean_only}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_metrics(args) -> int:
    """Latent diagnostics on a trained checkpoint: MI, MCC, latent error."""
    cfg = load_config(args.config, args.set)
    tasks, manifest = load_dataset(cfg["data"]["path"])
    model, _, _ = _load_model(args.checkpoint)
    indices = manifest["splits"][args.split]
    table = latent_table_from_model(model, tasks, indices)
    metrics: dict = {"config_hash": hash_config(cfg)}
    outdir = cfg["run"]["outdir"]
    os.makedirs(outdir, exist_ok=True)
    write_latent_table(os.path.join(outdir, "latents.csv"), table)
    if table.num_tasks >= 30 and table.d_z > 1:
        mat, score = mi_score(table)
        write_mi_matrix(os.path.join(outdir, "mi_matrix.csv"), mat)
        metrics["mi_score"] = score
    metrics["mcc"] = mcc(table)
    write_metrics(os.path.join(outdir, "latent_metrics.json"), metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disentango")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="S.K=V",
                        help="override a config key (section.key=value)")

    sp = sub.add_parser("gen", help="generate a synthetic multi-task dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--pairs", default="eval", choices=("train", "eval"))
    sp.add_argument("--mode", default="metano",
                    choices=("metano", "disentango", "single-task"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("adapt", help="fit lifting parameters of unseen tasks")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=("val", "test"))
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("traverse", help="export a latent traversal grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", type=int, default=0)
    sp.add_argument("--dims", default="0")
    sp.add_argument("--lo", type=float, default=-2.0)
    sp.add_argument("--hi", type=float, default=2.0)
    sp.add_argument("--steps", type=int, default=5)
    sp.set_defaults(func=cmd_traverse)

    sp = sub.add_parser("identcheck",
                        help="randomized check of the identifiability condition")
    sp.add_argument("--d-z", type=int, default=2)
    sp.add_argument("--d-b", type=int, default=2)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--mean-only", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_identcheck)

    sp = sub.add_parser("metrics", help="latent diagnostics on a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_metrics)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
