"""Command-line harness: run, compare, gradcheck, gen-data.

Precedence for settings is preset < config file < explicit flags.  Config
problems exit with status 2 and a message naming the offending field.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as data_mod
from . import federation as fed
from . import gradcheck


def _worker_count() -> int:
    raw = os.environ.get("FEDSIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise cfgmod.ConfigError(f"FEDSIM_THREADS: not an integer: {raw!r}")


def _resolve(args) -> cfgmod.ExperimentConfig:
    if args.preset:
        cfg = cfgmod.PRESETS[args.preset]()
    else:
        cfg = cfgmod.ExperimentConfig()
    if args.config:
        cfg = cfgmod.load_config(args.config, base=cfg)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _parse_seed_list(text: str):
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise cfgmod.ConfigError(f"seed: not an integer list: {text!r}")


def _cmd_run(args) -> int:
    cfg = _resolve(args)
    if args.strategy:
        cfg = replace(cfg, strategy=args.strategy)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w") as f:
        cfgmod.dump_config(cfg, f)
    records = []
    for seed in cfg.seeds:
        result = fed.run_experiment(cfg, seed, dump_dir=out / "buffers")
        records.extend(result.records)
    body = fed.results_csv(records)
    with open(out / "results.csv", "w") as f:
        f.write(body)
    print(f"wrote {out / 'results.csv'} ({len(records)} rows)")
    return 0


def _cmd_compare(args) -> int:
    cfg = _resolve(args)
    strategies = ([s for s in args.strategy.split(",") if s]
                  if args.strategy else [cfg.strategy])
    seeds = _parse_seed_list(args.seed) if args.seed else cfg.seeds
    if not strategies or not seeds:
        raise cfgmod.ConfigError("compare needs at least one strategy and one seed")
    for name in strategies:
        replace(cfg, strategy=name).validate()

    def cell(pair):
        name, seed = pair
        result = fed.run_experiment(replace(cfg, strategy=name), seed)
        return name, seed, result.final_accuracies()

    pairs = [(name, seed) for name in strategies for seed in seeds]
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(cell, pairs))
    else:
        outcomes = [cell(p) for p in pairs]

    by_strategy = {name: [] for name in strategies}
    for name, _, accs in outcomes:
        by_strategy[name].append(accs)
    num_clients = len(outcomes[0][2])

    header = ["strategy"] + [f"c{i}" for i in range(num_clients)] + ["avg"]
    rows = []
    for name in strategies:
        per_client = np.mean(np.stack(by_strategy[name]), axis=0)
        rows.append([name] + [f"{a:.4f}" for a in per_client]
                    + [f"{per_client.mean():.4f} ± {per_client.std():.4f}"])

    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    text_lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        text_lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    table = "\n".join(text_lines)
    print(table)

    csv_lines = [",".join(["strategy"] + [f"client{i}" for i in range(num_clients)]
                          + ["mean", "std"])]
    for name in strategies:
        per_client = np.mean(np.stack(by_strategy[name]), axis=0)
        csv_lines.append(",".join([name] + [f"{a:.10g}" for a in per_client]
                                  + [f"{per_client.mean():.10g}",
                                     f"{per_client.std():.10g}"]))
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w") as f:
        f.write("\n".join(csv_lines) + "\n")
    with open(out / "compare.txt", "w") as f:
        f.write(table + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_all()
    print(gradcheck.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if cfg.source != "synthetic":
        cfg = replace(cfg, source="synthetic")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    vcfg = cfg.vit_config()
    federation = data_mod.generate_synthetic(cfg.skew_spec(), seed,
                                             image_size=vcfg.image_size,
                                             channels=vcfg.channels)
    out = Path(args.out or cfg.out_dir)
    data_mod.write_external(federation, out)
    total = sum(len(c.labels) for c in federation.clients)
    print(f"wrote {federation.num_clients} clients / {total} images under {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="federated evidential prompt tuning, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                       help="configuration baseline")
        p.add_argument("--out", help="output directory")
        return p

    p_run = common(sub.add_parser("run", help="execute one strategy end to end"))
    p_run.add_argument("--strategy", choices=cfgmod.STRATEGIES)
    p_run.add_argument("--seed", type=int)
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = common(sub.add_parser("compare", help="strategy x seed result matrix"))
    p_cmp.add_argument("--strategy", help="comma-separated strategy names")
    p_cmp.add_argument("--seed", help="comma-separated seeds")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.set_defaults(fn=_cmd_gradcheck)

    p_gen = common(sub.add_parser("gen-data", help="write a synthetic federation"))
    p_gen.add_argument("--seed", type=int)
    p_gen.set_defaults(fn=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except cfgmod.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (fed.FederationError, data_mod.DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
