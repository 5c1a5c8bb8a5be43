"""Command-line shell: train, eval, generalize, gradcheck, enumcheck."""
from __future__ import annotations

import argparse
import os
import sys

from .checks import gradcheck_pipeline, normalization_check
from .envs import DOMAINS, make_env
from .harness import (RunConfig, build_run_config, evaluate, generalize,
                      parse_config_file, train, write_report_csv)
from .model import Model


def _seed_fallback(value):
    if value is not None:
        return int(value)
    return int(os.environ.get("RELRL_SEED", "0"))


def _size_from_args(args) -> dict:
    size = {}
    for key in ("n", "width", "height", "boxes"):
        val = getattr(args, key, None)
        if val is not None:
            size[key] = int(val)
    return size


def cmd_train(args) -> int:
    raw = parse_config_file(open(args.config).read()) if args.config else {}
    for item in args.set or []:
        key, val = item.split("=", 1)
        raw[key.strip()] = val.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    elif "seed" not in raw:
        raw["seed"] = str(_seed_fallback(None))
    if args.epochs is not None:
        raw["epochs"] = str(args.epochs)
    if args.out is not None:
        raw["out_dir"] = args.out
    config = build_run_config(raw)
    if config.out_dir is None:
        config.out_dir = "run_out"
    train(config, log=lambda msg: print(msg, flush=True))
    print(f"done; metrics and checkpoints in {config.out_dir}")
    return 0


def _load_for_domain(ckpt: str, domain: str | None, size: dict):
    model, meta = Model.load(ckpt)
    domain = domain or meta.get("domain")
    if domain is None:
        raise SystemExit("checkpoint has no domain; pass --domain")
    for key in ("n", "width", "height", "boxes"):
        if key not in size and f"size.{key}" in meta:
            size[key] = int(meta[f"size.{key}"])
    step_limit = int(float(meta.get("hp.step_limit", 100)))
    return model, domain, size, step_limit


def cmd_eval(args) -> int:
    model, domain, size, step_limit = _load_for_domain(args.ckpt, args.domain,
                                                       _size_from_args(args))
    env = make_env(domain, **size)
    report = evaluate(env, model, args.episodes, args.step_limit or step_limit,
                      _seed_fallback(args.seed), greedy=args.greedy)
    for key, val in report.items():
        print(f"{key}: {val}")
    if args.out:
        write_report_csv(args.out, [report])
    return 0


def parse_size_list(domain: str, text: str) -> list[dict]:
    """``5,10,20`` for N-sized domains; ``8x8/3,10x10/4`` for sokoban."""
    sizes = []
    for part in text.split(","):
        part = part.strip()
        if domain == "sokoban":
            dims, boxes = part.split("/")
            w, h = dims.split("x")
            sizes.append({"width": int(w), "height": int(h), "boxes": int(boxes)})
        else:
            sizes.append({"n": int(part)})
    return sizes


def cmd_generalize(args) -> int:
    model, domain, size, step_limit = _load_for_domain(args.ckpt, args.domain,
                                                       _size_from_args(args))
    sizes = parse_size_list(domain, args.sizes)
    reports = generalize(domain, model, sizes, args.episodes,
                         args.step_limit or step_limit, _seed_fallback(args.seed),
                         greedy=args.greedy, log=lambda msg: print(msg, flush=True))
    out = args.out or "report.csv"
    write_report_csv(out, reports)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for domain in DOMAINS:
        report = gradcheck_pipeline(domain, tolerance=args.tolerance)
        print(f"{domain}: {report}")
        failed |= not report.passed
    return 1 if failed else 0


def cmd_enumcheck(args) -> int:
    size = _size_from_args(args)
    if not size:
        size = {"blockworld": {"n": 3}, "sokoban": {"width": 6, "height": 6, "boxes": 1},
                "sysadmin_s": {"n": 6}, "sysadmin_m": {"n": 8}}[args.domain]
    result = normalization_check(args.domain, size, settings=args.settings,
                                 seed=_seed_fallback(args.seed))
    print(f"{args.domain}: {result['settings']} settings, "
          f"max |sum - 1| = {result['max_abs_deviation']:.3e}")
    return 0 if result["max_abs_deviation"] <= 1e-6 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="relrl",
                                     description="relational RL engine: train and evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain", choices=DOMAINS)
    p.add_argument("--n", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--step-limit", type=int, dest="step_limit")
    p.add_argument("--seed", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out", help="write report CSV here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generalize", help="evaluate a checkpoint across sizes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain", choices=DOMAINS)
    p.add_argument("--sizes", required=True,
                   help="comma list: N,... or WxH/boxes,... for sokoban")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--step-limit", type=int, dest="step_limit")
    p.add_argument("--seed", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generalize)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("enumcheck", help="brute-force policy normalization check")
    p.add_argument("--domain", choices=DOMAINS, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--settings", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_enumcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
