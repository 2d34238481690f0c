"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import orchestrator
from .config import load_config


def _cmd_partition(args) -> int:
    cfg = load_config(args.config)
    setup = orchestrator.prepare(cfg)
    print(setup.plan.table())
    for m, T in enumerate(setup.budgets, start=1):
        print(f"module {m}: round budget {T}")
    if args.out:
        setup.plan.write_csv(args.out)
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    result = orchestrator.run(cfg, out, resume=args.resume, max_rounds=args.max_rounds)
    if not result.state.done:
        print(f"stopped after round {result.state.t}; resume with --resume")
        return 0
    c, a = result.final_acc("test")
    print(f"run directory: {out}")
    print(f"test clean={c:.4f} adv={a:.4f} rounds={result.state.t} modules={result.backbone.M}")
    return 0


def _cmd_evaluate(args) -> int:
    row = orchestrator.evaluate_checkpoint(args.checkpoint, args.pgd_steps, args.epsilon)
    print(f"clean={row['clean_acc']:.4f} adv={row['adv_acc']:.4f} "
          f"(PGD-{row['pgd_steps']}, eps={row['epsilon']:.5g}, n={row['samples']})")
    return 0


def _cmd_report(args) -> int:
    print(orchestrator.report(args.run_dir))
    return 0


def _cmd_certify(args) -> int:
    out = args.out or Path(args.checkpoint).parent
    certs, gaps = orchestrator.certify_checkpoint(args.checkpoint, out, mu=args.mu)
    if not certs:
        print("mu = 0: displacement bound undefined, no certificate")
    for m, cert in enumerate(certs, start=1):
        print(f"certificate module {m}: {cert.summary()}")
    for g in gaps:
        print(f"inconsistency {g.summary()}")
    return 1 if any(c.violations for c in certs) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedprophet", description="Cascade federated adversarial training simulator")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("partition", help="print the module partition of a config")
    sp.add_argument("config")
    sp.add_argument("--out", help="write partition CSV here")
    sp.set_defaults(func=_cmd_partition)

    sp = sub.add_parser("train", help="run a simulation")
    sp.add_argument("config")
    sp.add_argument("--out", help="run directory (default runs/<config stem>)")
    sp.add_argument("--resume", action="store_true", help="continue from the run directory's last round")
    sp.add_argument("--max-rounds", type=int, default=None, help="stop after this many global rounds")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("evaluate", help="clean/adversarial test accuracy of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--pgd-steps", type=int, default=None)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=_cmd_report)

    sp = sub.add_parser("certify", help="displacement certificate and gradient-gap report")
    sp.add_argument("checkpoint")
    sp.add_argument("--mu", type=float, default=None, help="override the config mu")
    sp.add_argument("--out", default=None, help="CSV directory (default: the run directory)")
    sp.set_defaults(func=_cmd_certify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, orchestrator.ModuleTrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
