"""Command-line entry point: ``sake gen-data | train | eval | verify | bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .nbody import DatasetConfig, baseline_mse, generate_dataset, read_dataset, write_dataset


def cmd_gen_data(args) -> int:
    cfg = DatasetConfig(
        n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test,
        N=args.particles, n=args.dim, steps=args.steps, dt=args.dt, seed=args.seed,
    )
    ds = generate_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training_curve
    from .train import TrainConfig, load_config, train_flow, train_forecast

    overrides = {"task": args.task, "checkpoint": args.out, "data": args.data, "epochs": args.epochs, "seed": args.seed}
    cfg = load_config(args.config, **overrides) if args.config else TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if cfg.task == "forecast":
        result = train_forecast(cfg)
        keys = ("train_mse", "valid_mse")
        summary = {k: result[k] for k in ("best_epoch", "valid_mse", "test_mse", "baseline_test_mse", "skipped_steps")}
    elif cfg.task == "flow":
        result = train_flow(cfg)
        keys = ("train_nll", "valid_nll")
        summary = {k: result[k] for k in ("initial_valid_nll", "valid_nll", "improvement")}
    else:
        print(f"task {cfg.task!r} is run with 'sake {cfg.task}'", file=sys.stderr)
        return 2
    ckpt = Path(cfg.checkpoint)
    plot_training_curve(result["history"], ckpt.with_suffix(ckpt.suffix + ".png"), keys, title=cfg.task)
    print(" ".join(f"{k}={v!r}" for k, v in summary.items()))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import read_checkpoint
    from .train import flow_nll, forecast_mse, load_flow, load_model, mixture_target

    _, meta = read_checkpoint(args.ckpt)
    if meta.get("task") == "flow":
        stack = load_flow(args.ckpt)
        seed = int(meta["seed"])
        valid = mixture_target(args.samples, stack.num_nodes, stack.dim, seed + 1)
        print(f"valid_nll={flow_nll(stack, valid, seed)!r}")
        return 0
    if not args.data:
        print("--data is required for forecast checkpoints", file=sys.stderr)
        return 2
    model = load_model(args.ckpt)
    ds = read_dataset(args.data)
    for split in ("valid", "test"):
        part = ds.split(split)
        print(f"{split}_mse={forecast_mse(model, part)!r} {split}_baseline_mse={baseline_mse(part)!r}")
    return 0


def cmd_verify(args) -> int:
    from .verify import format_report, run_verify

    results = run_verify(args.suite or None)
    print("suite\tseed\tdeviation\ttolerance\tpass")
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args) -> int:
    from .bench import format_bench, run_bench
    from .plotting import plot_scaling

    rep = run_bench(num_nodes=args.nodes, base_edges=args.edges, repeats=args.repeats)
    print(format_bench(rep))
    if args.figure:
        plot_scaling(rep, args.figure)
    if args.json:
        Path(args.json).write_text(json.dumps(rep, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sake", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate the charged N-body dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=2666)
    g.add_argument("--n-train", type=int, default=3000)
    g.add_argument("--n-valid", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--particles", type=int, default=5)
    g.add_argument("--dim", type=int, default=3)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--dt", type=float, default=1e-3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a forecasting model or a flow")
    t.add_argument("--task", choices=("forecast", "flow"))
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--out", help="checkpoint path (overrides the config)")
    t.add_argument("--data", help="dataset path (overrides the config)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--samples", type=int, default=512, help="held-out samples for flow checkpoints")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--suite", action="append", help="suite name; repeatable (default: all)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="forward time against edge count")
    b.add_argument("--nodes", type=int, default=200)
    b.add_argument("--edges", type=int, default=5000)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--figure", help="write a log-log plot here")
    b.add_argument("--json", help="write the full report here")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
