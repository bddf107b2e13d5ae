"""Command line entry points.

Exit codes: 0 success, 1 invalid input (config, flags, model files),
2 runtime failure, 3 a verification check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .config import Config, ConfigError, parse_config, resolve_config_path
from .env import SERVICE_CLASSES, TraceError
from .net import ModelFormatError
from .oracle import TabularMDP, index_table, random_instance, verify_sweep
from .scheduler import ScenarioError, canonical_policy, run_scenario
from .trainer import ServiceEnv, TrainConfig, TrainingDiverged, train

log = logging.getLogger("whittlesched")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load(path) -> tuple[Config, Path]:
    p = resolve_config_path(path)
    return parse_config(p), p.parent


# subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.config:
        cfg_file, _ = _load(args.config)
        if cfg_file.train is None:
            raise ConfigError(f"{args.config}: no 'train' section")
        if args.class_id and args.class_id != cfg_file.train.class_id:
            raise UsageError(f"--class {args.class_id} contradicts config class {cfg_file.train.class_id}")
        cfg, spec = cfg_file.train_config(args.seed)
    else:
        if not args.class_id:
            raise UsageError("train needs --class or --config")
        from .env import default_class
        spec = default_class(args.class_id)
        cfg = TrainConfig(class_id=args.class_id, seed=args.seed if args.seed is not None else 0)
    overrides = {k: v for k, v in (("episodes_total", args.episodes), ("episode_len", args.episode_len),
                                     ("batch_size", args.batch_size), ("reward_violations", args.reward_violations))
                 if v is not None}
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    cfg.jobs = args.jobs
    env = ServiceEnv(spec)
    out = Path(args.out)

    def progress(row):
        if row["batch"] % max(1, cfg.n_batches // 10) == 0:
            log.info("batch %d/%d mean return %.4f", row["batch"] + 1, cfg.n_batches, row["mean_return"])

    try:
        result = train(cfg, env=env, progress=progress)
    except TrainingDiverged as e:
        e.last_good.save(out.with_suffix(".last_good.json"))
        log.error("%s; last good parameters saved next to %s", e, out)
        return EXIT_RUNTIME
    result.net.save(out)
    log_path = out.with_suffix(".log.csv")
    result.write_log(log_path)
    if args.plot:
        from .plotting import plot_training
        plot_training(result.history, args.plot, title=f"{cfg.class_id} training")
    print(json.dumps({"model": str(out), "log": str(log_path), "batches": cfg.n_batches,
                      "final_mean_return": result.history[-1]["mean_return"],
                      "sensitivity": result.sensitivity}, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, base = _load(args.scenario)
    spec = cfg.scenario_spec(base)
    if args.horizon is not None:
        spec.horizon = args.horizon
    slices = None
    if args.slices:
        scfg, _ = _load(args.slices)
        slices = scfg.slice_config()
        if slices is None:
            raise ConfigError(f"{args.slices}: no 'slicing' section")
    policy = canonical_policy(args.policy)
    seed = args.seed if args.seed is not None else cfg.seed
    report = run_scenario(spec, policy, seed, slices=slices, model_dir=args.model_dir or base,
                          threads=args.jobs)
    out = Path(args.out)
    metrics_mod.export(report, out, "structured")
    csv_path = out.with_suffix(".csv")
    metrics_mod.export(report, csv_path, "csv")
    written = [str(out), str(csv_path)]
    if args.plot:
        from .plotting import plot_ue_throughput, plot_violations
        prefix = Path(args.plot)
        written.append(str(plot_violations([report], prefix.with_name(prefix.name + "_violations.png"),
                                           title=spec.name)))
        written.append(str(plot_ue_throughput(report, prefix.with_name(prefix.name + "_throughput.png"))))
    print(json.dumps({"policy": report.policy, "seed": seed, "total_violation": report.total_violation(),
                      "files": written}, sort_keys=True))
    return EXIT_OK


def cmd_verify_oracle(args) -> int:
    if args.config:
        cfg, _ = _load(args.config)
        if cfg.oracle is None:
            raise ConfigError(f"{args.config}: no 'oracle' section")
        o = cfg.oracle
        n, qmax, grid, tol, slack = o.instances, o.max_queue_max, o.lambda_grid.values(), o.tol, o.slack
        seed = cfg.seed
    else:
        n, qmax, grid, tol, slack, seed = 50, 30, np.linspace(0.0, 3.0, 20), 1e-9, 1e-8, 0
    if args.instances is not None:
        n = args.instances
    if args.seed is not None:
        seed = args.seed
    rng = np.random.default_rng(seed)
    instances = [random_instance(rng, qmax) for _ in range(n)]
    t0 = time.perf_counter()
    res = verify_sweep(instances, grid, tol, slack)
    elapsed = time.perf_counter() - t0
    summary = {
        "instances": n, "lambdas": len(grid), "seed": seed,
        "concavity": not res.concavity_failures, "threshold": not res.threshold_failures,
        "indexability": not res.indexability_failures, "max_dv_excess": res.max_dv_excess,
        "passed": res.passed,
    }
    for name, fails in (("concavity", res.concavity_failures), ("threshold", res.threshold_failures),
                        ("indexability", res.indexability_failures)):
        for f in fails[:5]:
            log.error("%s failed on instance %d: %s", name, f[0], f[1:])
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("sweep took %.1f s", elapsed)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if res.passed else EXIT_VERIFY


def cmd_bench(args) -> int:
    from .bench import bench_inference
    res = bench_inference(args.ues, args.threads, args.repeats, args.seed if args.seed is not None else 0)
    text = json.dumps(res, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_index_table(args) -> int:
    if args.config:
        cfg, _ = _load(args.config)
        if cfg.mdp is None:
            raise ConfigError(f"{args.config}: no 'mdp' section")
        mdp = cfg.mdp.build()
    else:
        if args.max_queue is None or args.beta is None or args.gamma is None:
            raise UsageError("index-table needs --config or --max-queue, --beta and --gamma")
        mdp = TabularMDP(args.max_queue, args.beta, args.gamma, args.r0, args.r1, args.mu_r, args.mu_l)
    table = index_table(mdp, tol=args.tol)
    if args.out:
        table.to_csv(args.out)
    for s, w in enumerate(table.index):
        print(f"{s},{float(w)!r}")
    return EXIT_OK


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    p = _Parser(prog="whittlesched", description="Index-based MAC scheduling toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train one class's index network")
    t.add_argument("--class", dest="class_id", choices=SERVICE_CLASSES)
    t.add_argument("--config", help="YAML file (or shipped name such as train_embb) with a 'train' section")
    t.add_argument("--out", required=True, help="model file (JSON); log goes to <out>.log.csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--reward-violations", choices=("constant", "realized"))
    t.add_argument("--episodes", type=int, help="total episodes (overrides config)")
    t.add_argument("--episode-len", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--plot", help="write the training curve to this PNG")
    t.add_argument("--jobs", type=int, default=1, help="episode workers")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="simulate a scenario under one policy")
    r.add_argument("--scenario", required=True, help="YAML file or shipped name (scenario1..6, slicing1..4)")
    r.add_argument("--policy", required=True, help="windex, maxweight, maxcqi, pf or rr")
    r.add_argument("--slices", help="YAML file with a 'slicing' section")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="structured report (JSON); CSV goes to <out>.csv")
    r.add_argument("--horizon", type=int, help="override the scenario horizon in TTIs")
    r.add_argument("--model-dir", help="directory for UE model files (default: the scenario's)")
    r.add_argument("--plot", help="figure prefix; writes <prefix>_violations.png and <prefix>_throughput.png")
    r.add_argument("--jobs", type=int, default=1, help="inference threads")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-oracle", parents=[common], help="concavity, threshold and indexability sweep")
    v.add_argument("--config", help="YAML with an 'oracle' section (default: 50 instances, 20-point grid)")
    v.add_argument("--instances", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", help="write the summary JSON here")
    v.set_defaults(func=cmd_verify_oracle)

    b = sub.add_parser("bench-inference", parents=[common], help="forward-pass latency percentiles")
    b.add_argument("--ues", type=int, default=20)
    b.add_argument("--threads", type=int, default=2)
    b.add_argument("--repeats", type=int, default=2000)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("index-table", parents=[common], help="exact per-state index of one tabular arm")
    i.add_argument("--config", help="YAML with an 'mdp' section")
    i.add_argument("--max-queue", type=int)
    i.add_argument("--beta", type=float)
    i.add_argument("--gamma", type=float)
    i.add_argument("--r0", type=int, default=0)
    i.add_argument("--r1", type=int, default=1)
    i.add_argument("--mu-r", type=float, default=0.0)
    i.add_argument("--mu-l", type=float, default=0.0)
    i.add_argument("--tol", type=float, default=1e-6)
    i.add_argument("--seed", type=int, help="accepted for uniformity; the computation is deterministic")
    i.add_argument("--out", help="CSV with columns state,index")
    i.set_defaults(func=cmd_index_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ScenarioError, ModelFormatError, TraceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
