"""Command-line entry point: ``setdet <subcommand> ...``."""

import argparse
import logging
import os
import sys

from . import harness as H
from .errors import ConfigError, ContractViolation, InfeasibleMatchingError, NumericError

EPILOG = """\
log.csv columns (one row per epoch):
  epoch, loss, loss_cls, loss_l1, loss_giou, loss_aux  mean training loss terms
  AP, AP50, AP75, AP_s, AP_m, AP_l                      validation COCO-style AP
  duplicate_rate      mean share of confident same-class overlapping predictions
  instability         share of objects whose matched token changed since the
                      previous epoch (epoch 1: since initialization; nan for
                      the independent matcher)
  sparsity_encL / sparsity_decL  pooled attention sparsity of encoder
                      self-attention / decoder cross-attention layer L
compare.csv: epoch plus one AP column per run.  sweep_k.csv: k, AP, AP50,
AP75, AP_s, AP_m, AP_l.  attention CSV: layer, kind, sparsity.
"""


def _config(args):
    cfg = H.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "sparsity_variant", None):
        cfg = cfg.replace(sparsity_variant=args.sparsity_variant)
    return cfg


def _out(args, cfg):
    return args.out or os.path.join("runs", f"{cfg.name}_s{cfg.seed}")


def cmd_train(args):
    cfg = _config(args)
    log = logging.getLogger("setdet")
    run = H.run_train(cfg, _out(args, cfg),
                      progress=lambda c, r: log.info("epoch %d loss %.4f AP %.4f", r["epoch"], r["loss"], r["AP"]))
    print(run)


def cmd_eval(args):
    report, dup, sparsity = H.run_eval(args.run, args.sparsity_variant)
    for k, v in report.as_dict().items():
        print(f"{k}={v!r}")
    print(f"duplicate_rate={dup!r}")
    for k, v in H.sparsity_columns(sparsity).items():
        print(f"{k}={v!r}")


def cmd_compare(args):
    cfgs = []
    for path in args.config:
        cfg = H.ExperimentConfig.load(path)
        cfgs.append(cfg if args.seed is None else cfg.replace(seed=args.seed))
    print(H.run_compare(cfgs, args.out or "runs/compare", args.metric, args.jobs))


def cmd_sweep_k(args):
    cfg = _config(args)
    ks = [int(k) for k in args.k.split(",")]
    print(H.run_sweep_k(cfg, ks, args.out or f"runs/{cfg.name}_sweep_k", args.jobs))


def cmd_analyze(args):
    print(H.analyze_attention(args.run, args.sparsity_variant or "paper", args.out))


def cmd_distill(args):
    cfg = _config(args).replace(matcher="distilled", teacher=os.path.abspath(args.teacher))
    print(H.run_train(cfg, _out(args, cfg)))


def parser():
    p = argparse.ArgumentParser(prog="setdet", description="Set-prediction detectors on synthetic scenes.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
        sp.add_argument("--sparsity-variant", choices=("paper", "entropy"))

    common(sub.add_parser("train", help="train one configuration"))
    sp = sub.add_parser("eval", help="re-evaluate a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--sparsity-variant", choices=("paper", "entropy"))
    sp = sub.add_parser("compare", help="train several configs and align AP curves")
    sp.add_argument("--config", action="append", required=True)
    sp.add_argument("--metric", default="AP")
    common(sp, config=False)
    sp = sub.add_parser("sweep-k", help="final AP as a function of selected tokens")
    common(sp)
    sp.add_argument("--k", required=True, help="comma-separated k values")
    sp = sub.add_parser("analyze-attention", help="per-layer attention sparsity of a run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--sparsity-variant", choices=("paper", "entropy"))
    sp = sub.add_parser("distill", help="train a student on a teacher's frozen matching")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher run directory")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "sweep-k": cmd_sweep_k,
            "analyze-attention": cmd_analyze, "distill": cmd_distill}


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, ContractViolation, InfeasibleMatchingError, NumericError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
