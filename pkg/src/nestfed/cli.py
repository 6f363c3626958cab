"""Command line entry point: ``nestfed run|validate|oracle-check CONFIG``."""

from __future__ import annotations

import argparse
import sys

from .config import parse_config
from .errors import NestFedError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestfed", description="Nested federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "train and write metrics"),
                        ("validate", "check a config and print the derived submodels"),
                        ("oracle-check", "compare nested averaging against the coordinate oracle")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="path to a JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out-dir", default=None, help="override output.dir")
        if name == "run":
            sp.add_argument("--rounds", type=int, default=None, help="stop after this many rounds")
            sp.add_argument("--quiet", action="store_true")
        if name == "oracle-check":
            sp.add_argument("--trials", type=int, default=200)
    return p


def _validate(args) -> int:
    from .runner import build_experiment

    exp = build_experiment(parse_config(args.config), args.seed)
    print(f"model: {exp.model.block_kind} stages={list(exp.model.stages)} input={list(exp.model.input_shape)}")
    print(f"data: {len(exp.train)} train / {len(exp.test)} test, {len(exp.parts)} clients")
    for s in exp.specs:
        mask = "".join(str(m) for m in s.mask)
        print(f"  k={s.k} gamma={s.gamma:.2f} achieved={s.achieved:.3f} gamma_W={s.gamma_W:.2f} "
              f"gamma_D={s.gamma_D:.2f} widths={list(s.stage_widths)} mask={mask} "
              f"steps={','.join(f'{v:g}' for v in s.init_step)}")
    print("ok")
    return 0


def _run(args) -> int:
    from .runner import run_config

    cfg = parse_config(args.config)

    def progress(rep):
        if not args.quiet:
            tops = " ".join(f"{r.top1:.3f}" for r in rep.results)
            print(f"round {rep.round:4d} lr={rep.lr:g} top1=[{tops}] worst={rep.worst:.3f}", flush=True)

    out = args.out_dir or cfg.output.dir
    reports, _ = run_config(cfg, out, args.seed, args.rounds, progress)
    if reports:
        print(f"final worst={reports[-1].worst:.4f} mean={reports[-1].mean:.4f}")
    print(f"wrote {out}")
    return 0


def _oracle(args) -> int:
    from .aggregation import differential_check
    from .models import build_model
    from .runner import build_experiment

    exp = build_experiment(parse_config(args.config), args.seed)
    seed = exp.config.seed
    store = build_model(exp.model, seed, exp.specs, exp.config.federation.bn_consistent)
    gap = differential_check(store, exp.specs, args.trials, seed)
    ok = gap <= 1e-12
    print(f"{args.trials} trials, max |nested - oracle| = {gap:.3e}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _run, "validate": _validate, "oracle-check": _oracle}[args.command]
    try:
        return handler(args)
    except NestFedError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
