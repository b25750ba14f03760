"""Command-line entry point: ``rankgame {run,check-theorem,compare,export-env}``.

Exit status is 0 on success, 1 when a seed fails or the certificate is
violated, and 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .diagnostics import reports_to_csv
from .envs import build_env
from .experiment import (
    atomic_write,
    certificate_sweep,
    compare_configs,
    dumps_json,
    format_compare,
    prepare,
    run_seeds,
    seed_list,
    thread_cap,
    write_outputs,
)
from .mdp import save_mdp
from .stackelberg import run_game

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _mode_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exact", dest="empirical", action="store_false", default=None,
                   help="exact agent occupancies (deterministic)")
    g.add_argument("--empirical", dest="empirical", action="store_true",
                   help="agent occupancies estimated from sampled rollouts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankgame", description="Ranking-game imitation experiments on tabular MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured game for every seed")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed-offset", type=int, default=0)
    run.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
    _mode_flags(run)

    chk = sub.add_parser("check-theorem", help="certificate sweep over random instances and a full game run")
    chk.add_argument("--config", required=True, type=Path)
    chk.add_argument("--seed-offset", type=int, default=0)
    chk.add_argument("--out", type=Path, default=None, help="optional directory for the per-instance CSVs")
    _mode_flags(chk)

    cmp_ = sub.add_parser("compare", help="steps-to-threshold table for variants sharing a scenario")
    cmp_.add_argument("configs", nargs="*", type=Path, metavar="CONFIG")
    cmp_.add_argument("--config", dest="extra_configs", action="append", type=Path, default=[])
    cmp_.add_argument("--seed-offset", type=int, default=0)
    cmp_.add_argument("--out", type=Path, default=None, help="directory for compare.json")
    _mode_flags(cmp_)

    exp = sub.add_parser("export-env", help="write the scenario's MDP as JSON")
    exp.add_argument("--config", required=True, type=Path)
    exp.add_argument("--seed-offset", type=int, default=0)
    exp.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")
    return parser


def _err(msg: str) -> None:
    print(f"rankgame: error: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = args.out or Path(cfg.output_dir)
    outcomes = run_seeds(cfg, args.seed_offset, args.empirical, thread_cap())
    summary = write_outputs(cfg, outcomes, out, args.empirical)
    for run in summary["runs"]:
        fin = run["final"]
        print(f"seed {run['seed']}: rounds={run['rounds']} true_return_ratio={fin['true_return_ratio']} "
              f"steps_to_threshold={run['steps_to_threshold']} bound_violations={run['bound_violations']}")
    for f in summary["failures"]:
        _err(f"seed {f['seed']} failed: {f['error']}")
    print(f"wrote {out}")
    return EXIT_FAIL if summary["failures"] else EXIT_OK


def cmd_check_theorem(args) -> int:
    cfg = load_config(args.config)
    sw = cfg.sweep
    sweep = certificate_sweep(sw.n_instances, sw.max_states, sw.max_actions, sw.gammas, sw.seed + args.seed_offset)
    n_sweep = sum(r.bound_satisfied for r in sweep)
    print(f"sweep: {n_sweep}/{len(sweep)} instances satisfy the bound")

    seed = seed_list(cfg, args.seed_offset)[0]
    mdp, expert, game, kwargs = prepare(cfg, seed, args.empirical)
    history = run_game(mdp, expert, game, **kwargs).history
    n_game = sum(r.bound_satisfied for r in history)
    print(f"game: {n_game}/{len(history)} rounds satisfy the bound (seed {seed})")
    if args.out is not None:
        atomic_write(args.out / "sweep.csv", reports_to_csv(sweep))
        atomic_write(args.out / f"game_seed_{seed}.csv", reports_to_csv(history))
    ok = n_sweep == len(sweep) and n_game == len(history)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_compare(args) -> int:
    paths = list(args.configs) + list(args.extra_configs)
    if len(paths) < 2:
        _err("compare needs at least two configs")
        return EXIT_USAGE
    configs = [load_config(p) for p in paths]
    try:
        table = compare_configs(configs, args.seed_offset, args.empirical, thread_cap(),
                                names=[p.stem for p in paths])
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    sys.stdout.write(format_compare(table))
    if args.out is not None:
        atomic_write(args.out / "compare.json", dumps_json(table))
    failed = any(v["failures"] for v in table["variants"])
    return EXIT_FAIL if failed else EXIT_OK


def cmd_export_env(args) -> int:
    cfg = load_config(args.config)
    spec = replace(cfg.scenario, seed=cfg.scenario.seed + args.seed_offset)
    mdp, _, _ = build_env(spec)
    if args.out is None:
        sys.stdout.write(dumps_json(mdp.to_dict()))
    else:
        save_mdp(mdp, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "check-theorem": cmd_check_theorem,
    "compare": cmd_compare,
    "export-env": cmd_export_env,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
