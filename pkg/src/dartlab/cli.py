"""``dartlab`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, theory
from .attacks import eval_attack
from .data import gen_shifted_blobs, gen_two_moons_shift, save_csv, split_target
from .trainers import ALGORITHMS

log = logging.getLogger("dartlab")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(path) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.load(path) if path else harness.ExperimentConfig()


def cmd_gen_data(args) -> int:
    if args.kind == "two_moons":
        src, tgt = gen_two_moons_shift(args.n, args.rotation, args.noise, args.seed)
    else:
        src, tgt = gen_shifted_blobs(args.n, tuple(args.shift), args.classes, args.std, args.seed)
    out = Path(args.out)
    save_csv(src, out / "source.csv")
    save_csv(tgt, out / "target.csv")
    tr, va, te = split_target(tgt, seed=args.seed)
    save_csv(tr, out / "target_train.csv")
    save_csv(va, out / "target_val.csv")
    save_csv(te, out / "target_test.csv")
    print(f"wrote {out}/source.csv, target.csv and target_{{train,val,test}}.csv")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    res = harness.run_experiment(cfg, args.out, force=args.force)
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out = args.out or cfg.output_dir
    res = harness.random_search(cfg, args.trials, args.seed, out, force=args.force)
    failed = sum(1 for t in res.trials if t["status"] != "ok")
    print(json.dumps({"best_trial": res.best_trial, "trials": len(res.trials), "failed": failed}, sort_keys=True))
    return 0 if res.best_trial is not None else 1


def cmd_eval(args) -> int:
    params, data = harness.load_model_and_data(args.ckpt, args.data)
    attack = eval_attack(args.alpha, args.steps, tuple(args.clamp) if args.clamp else None)
    result = harness.evaluate(params, data, attack, np.random.default_rng(args.seed))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_theory_check(args) -> int:
    report = theory.check_instance_file(args.instance, args.out)
    if args.out is None:
        print(json.dumps(report, indent=2))
    else:
        print(f"{len(report['hypotheses'])} hypotheses checked, {len(report['violations'])} violations")
    return 0 if not report["violations"] else 2


def cmd_alpha_sweep(args) -> int:
    cfg = _load_config(args.config)
    alphas = args.alphas
    if args.ckpt:
        if not args.data:
            raise SystemExit("--ckpt needs --data")
        models, test = {}, None
        for item in args.ckpt:
            name, _, path = item.rpartition("=")
            params, test = harness.load_model_and_data(path, args.data)
            models[name or Path(path).stem] = params
        rows = harness.alpha_sweep_rows(models, test, alphas, cfg.eval_attack)
        if args.out:
            harness.write_alpha_csv(Path(args.out) / "alpha_sweep.csv", rows)
    else:
        algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
        bad = [a for a in algos if a not in ALGORITHMS]
        if bad:
            raise SystemExit(f"unknown algorithms: {bad}")
        rows = harness.run_alpha_sweep(cfg, algos, alphas, args.out)
    print(",".join(harness.CSV_HEADER))
    for a, name, nat, rob in rows:
        print(f"{a!r},{name},{nat!r},{rob!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dartlab", description="Robust domain adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic source/target pair as CSV")
    g.add_argument("--kind", choices=("two_moons", "blobs"), default="two_moons")
    g.add_argument("--n", type=int, default=2000, help="points per domain")
    g.add_argument("--rotation", type=float, default=30.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--shift", type=float, nargs=2, default=(1.0, 0.5))
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--std", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain, train one algorithm, evaluate")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="random hyperparameter search")
    s.add_argument("--config")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    e = sub.add_parser("eval", help="standard and PGD accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="labeled CSV")
    e.add_argument("--alpha", type=float, default=0.1)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0, help="seed for random starts")
    e.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"), help="input box, e.g. 0 1 for pixel data")
    e.set_defaults(fn=cmd_eval)

    th = sub.add_parser("theory-check", help="check the adversarial target bound on a finite instance")
    th.add_argument("--instance", required=True)
    th.add_argument("--out")
    th.set_defaults(fn=cmd_theory_check)

    a = sub.add_parser("alpha-sweep", help="robust accuracy against perturbation size")
    a.add_argument("--alphas", type=_floats, default=[0.0, 0.05, 0.1, 0.2])
    a.add_argument("--config")
    a.add_argument("--algorithms", default="natural_uda,dart")
    a.add_argument("--ckpt", action="append", help="name=path of a trained checkpoint (repeatable)")
    a.add_argument("--data", help="labeled CSV used with --ckpt")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_alpha_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, harness.ExperimentError) as exc:
        print(f"dartlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
