"""Command-line entry point: data generation, training, evaluation and the experiment harnesses.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import autograd as ag
from . import checks, evaluation, gailrl, nets
from .config import Config
from .data import build_dataset, load_dataset, save_dataset
from .world import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="decompgail", description="Decomposed-discriminator GAIL for token traffic.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="runs", help="output directory")
        return sp

    def data_arg(sp):
        sp.add_argument("--data", help="directory written by gen-data (default: rebuild from config and seed)")

    def ckpt_arg(sp):
        sp.add_argument("--checkpoint", required=True, help="checkpoint directory")

    def iters_arg(sp):
        sp.add_argument("--iterations", type=int, help="override train.iterations")

    add("gen-data", "generate scenarios, vocabulary and expert demonstrations")
    sp = add("pretrain-bc", "behaviour-clone the policy on expert demonstrations")
    data_arg(sp)
    sp.add_argument("--steps", type=int, help="override train.bc_steps")
    sp = add("train-decompgail", "fine-tune with the decomposed discriminator")
    data_arg(sp), ckpt_arg(sp), iters_arg(sp)
    sp.add_argument("--variant", choices=gailrl.VARIANTS, help="override train.variant")
    sp = add("train-psgail", "fine-tune with the monolithic discriminator")
    data_arg(sp), ckpt_arg(sp), iters_arg(sp)
    sp.add_argument("--cap", default="all", help="neighbour cap M (integer or 'all')")
    sp = add("eval", "evaluate a checkpoint on the held-out scenarios")
    data_arg(sp), ckpt_arg(sp)
    sp.add_argument("--rollouts", type=int, help="override eval.rollouts")
    sp = add("stability", "track discriminator scores for PS-GAIL caps and DecompGAIL")
    data_arg(sp), ckpt_arg(sp), iters_arg(sp)
    sp = add("ablation", "train and evaluate every ablation variant")
    data_arg(sp), ckpt_arg(sp), iters_arg(sp)
    sp = add("grad-check", "finite-difference check of every objective")
    sp.add_argument("--per-tensor", type=int, default=3, help="coordinates checked per parameter tensor")
    return p


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dataset(args, cfg):
    return load_dataset(args.data) if getattr(args, "data", None) else build_dataset(cfg, args.seed)


def _load_ckpt(path):
    try:
        return ag.ParamStore.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _train_cfg(cfg, args, **overrides):
    d = cfg.train.to_dict()
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    d.update({k: v for k, v in overrides.items() if v is not None})
    return gailrl.TrainConfig.from_dict(d)


def cmd_gen_data(args, cfg):
    save_dataset(build_dataset(cfg, args.seed), args.out)
    return EXIT_OK


def cmd_pretrain_bc(args, cfg):
    ds = _dataset(args, cfg)
    tcfg = _train_cfg(cfg, args)
    steps = tcfg.bc_steps if args.steps is None else args.steps
    store = nets.init_all(cfg.nets, args.seed, disc=None)
    logs = gailrl.train_bc(store, ds.train_demos, cfg.nets, tcfg, args.seed, steps)
    store.save(os.path.join(args.out, "checkpoint"))
    _write(os.path.join(args.out, "bc_log.csv"), evaluation.rows_to_csv(logs, ["step", "nll"]))
    nll, acc = gailrl.bc_metrics(store, ds.heldout_demos, cfg.nets)
    _write(os.path.join(args.out, "bc_heldout.csv"),
           evaluation.rows_to_csv([{"nll": nll, "top1": acc}], ["nll", "top1"]))
    print(f"held-out NLL {nll:.4f}  top-1 {acc:.4f}")
    return EXIT_OK


def _finish_training(args, res):
    res.store.save(os.path.join(args.out, "checkpoint"))
    if res.diverged:
        print(f"diverged: {res.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_train_decompgail(args, cfg):
    ds = _dataset(args, cfg)
    tcfg = _train_cfg(cfg, args, variant=args.variant)
    os.makedirs(args.out, exist_ok=True)
    res = gailrl.train_decompgail(_load_ckpt(args.checkpoint), ds.train_demos, ds.train, cfg.nets, tcfg, args.seed,
                                  log_path=os.path.join(args.out, "train_log.csv"))
    return _finish_training(args, res)


def _cap(text):
    if text == "all":
        return None
    try:
        cap = int(text)
    except ValueError:
        raise ConfigError(f"--cap must be an integer or 'all', got {text!r}") from None
    if cap < 0:
        raise ConfigError("--cap must be non-negative")
    return cap


def cmd_train_psgail(args, cfg):
    ds = _dataset(args, cfg)
    tcfg = _train_cfg(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    res = gailrl.train_psgail(_load_ckpt(args.checkpoint), ds.train_demos, ds.train, cfg.nets, tcfg, args.seed,
                              _cap(args.cap), log_path=os.path.join(args.out, "train_log.csv"))
    return _finish_training(args, res)


def cmd_eval(args, cfg):
    ds = _dataset(args, cfg)
    R = cfg.eval.rollouts if args.rollouts is None else args.rollouts
    m = evaluation.evaluate(_load_ckpt(args.checkpoint), ds.heldout, ds.vocab, cfg.nets, R, args.seed,
                            cfg.eval.batch)
    _write(os.path.join(args.out, "metrics.csv"), m.to_csv())
    print(m.to_csv(), end="")
    return EXIT_OK


def cmd_stability(args, cfg):
    ds = _dataset(args, cfg)
    iters = cfg.eval.stability_iterations if args.iterations is None else args.iterations
    rep = evaluation.stability_harness(_load_ckpt(args.checkpoint), ds.train_demos, ds.train, cfg.nets,
                                       _train_cfg(cfg, args), args.seed, iters, cfg.eval.stability_caps,
                                       cfg.eval.stability_window)
    _write(os.path.join(args.out, "stability.csv"), rep.to_csv())
    _write(os.path.join(args.out, "stability_summary.csv"), rep.summary_csv())
    print(rep.summary_csv(), end="")
    print("verdict:", "decompgail std below psgail_all" if rep.verdict() else "decompgail std NOT below psgail_all")
    return EXIT_OK


def cmd_ablation(args, cfg):
    ds = _dataset(args, cfg)
    iters = cfg.eval.ablation_iterations if args.iterations is None else args.iterations
    table, stores = evaluation.ablation_harness(_load_ckpt(args.checkpoint), ds.train_demos, ds.train, ds.heldout,
                                                cfg.nets, _train_cfg(cfg, args), args.seed, iters,
                                                cfg.eval.rollouts, args.seed)
    for label, store in stores.items():
        store.save(os.path.join(args.out, "checkpoints", label.replace(" ", "_").replace("/", "")))
    text = evaluation.rows_to_csv(table, evaluation.ABLATION_COLUMNS)
    _write(os.path.join(args.out, "ablation.csv"), text)
    print(text, end="")
    return EXIT_OK


def cmd_grad_check(args, cfg):
    errs = checks.grad_check_suite(cfg.nets, args.seed, args.per_tensor)
    rows = [{"objective": k, "max_rel_error": v} for k, v in errs.items()]
    _write(os.path.join(args.out, "grad_check.csv"), evaluation.rows_to_csv(rows, ["objective", "max_rel_error"]))
    for k, v in errs.items():
        print(f"{k:12s} {v:.3e}")
    return EXIT_OK if max(errs.values()) < checks.GRAD_TOLERANCE else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-bc": cmd_pretrain_bc,
    "train-decompgail": cmd_train_decompgail,
    "train-psgail": cmd_train_psgail,
    "eval": cmd_eval,
    "stability": cmd_stability,
    "ablation": cmd_ablation,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = Config.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except gailrl.Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
