"""Seeded experiment runs, certificate sweeps and variant comparisons.

The command-line front end is a thin layer over these functions.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_to_dict
from .diagnostics import CSV_COLUMNS, GameReport, reports_to_csv, steps_to_threshold, theorem1_certificate
from .envs import ScenarioSpec, build_env, make_offline_preferences, mutation_hook, random_mdp
from .mdp import Policy, exact_visitation
from .ranking import ShapingFamily, Snippets, closed_form_reward
from .reward import STATE_ACTION, RewardFn
from .stackelberg import run_game

THREADS_ENV = "RANKGAME_THREADS"
FINAL_METRICS = tuple(c for c in CSV_COLUMNS if c not in ("round", "bound_satisfied"))


def thread_cap(default: int | None = None) -> int:
    """Worker cap from RANKGAME_THREADS, else ``default`` or the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, default or os.cpu_count() or 1)
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if val < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return val


def seed_list(cfg: ExperimentConfig, seed_offset: int = 0) -> list[int]:
    return [cfg.game.seed + seed_offset + i for i in range(cfg.repeats)]


def prepare(cfg: ExperimentConfig, seed: int, empirical: bool | None = None):
    """Environment, expert and game keyword arguments for one seed.

    The scenario seed is shifted by the same amount as the game seed, so
    repeat i sees its own expert demonstration.
    """
    shift = seed - cfg.game.seed
    spec = replace(cfg.scenario, seed=cfg.scenario.seed + shift)
    game = replace(cfg.game, seed=seed)
    if empirical is not None:
        game = replace(game, use_empirical=bool(empirical))
    mdp, expert, pi_e = build_env(spec)
    kwargs = {"expert_policy": pi_e}
    if spec.mutation is not None:
        kwargs["on_round"] = mutation_hook(spec)
    if game.loss_kind == "offline":
        off = cfg.offline
        prefs = make_offline_preferences(
            mdp, None, off.n_levels, seed=spec.seed + off.seed_offset,
            family=ShapingFamily(off.shaping_kind, off.shaping_beta, mdp.r_max),
            temperatures=off.temperatures, n_trajectories=max(off.n_trajectories, 1),
            exact=off.n_trajectories == 0, lfo=spec.lfo, return_all=True,
        )
        kwargs["offline_chain"] = prefs.chain
        if prefs.trajectories:
            kwargs["snippets"] = Snippets(prefs.trajectories, prefs.targets, game.snippet_len)
    return mdp, expert, game, kwargs


def run_seed(cfg: ExperimentConfig, seed: int, empirical: bool | None = None) -> list[GameReport]:
    mdp, expert, game, kwargs = prepare(cfg, seed, empirical)
    return run_game(mdp, expert, game, **kwargs).history


def recovery_round(cfg: ExperimentConfig) -> int:
    """Last round before the scenario mutation (0 without one)."""
    mut = cfg.scenario.mutation
    return 0 if mut is None else mut.round - 1


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_num(x):
    x = float(x)
    return None if math.isnan(x) or math.isinf(x) else x


@dataclass
class SeedOutcome:
    seed: int
    reports: list = field(default_factory=list)
    error: str | None = None


def _seed_job(args) -> SeedOutcome:
    cfg, seed, empirical = args
    try:
        return SeedOutcome(seed, run_seed(cfg, seed, empirical))
    except Exception as exc:  # reported per seed, never fatal for the others
        return SeedOutcome(seed, error=f"{type(exc).__name__}: {exc}")


def run_seeds(cfg: ExperimentConfig, seed_offset: int = 0, empirical: bool | None = None,
              threads: int | None = None) -> list[SeedOutcome]:
    seeds = seed_list(cfg, seed_offset)
    jobs = [(cfg, s, empirical) for s in seeds]
    workers = min(len(jobs), threads or thread_cap())
    if workers <= 1:
        return [_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_seed_job, jobs))


def summarize(cfg: ExperimentConfig, outcomes: list[SeedOutcome], empirical: bool | None = None) -> dict:
    use_emp = cfg.game.use_empirical if empirical is None else bool(empirical)
    after = recovery_round(cfg)
    runs, failures = [], []
    for o in outcomes:
        if o.error is not None:
            failures.append({"seed": o.seed, "error": o.error})
            continue
        last = o.reports[-1]
        steps = steps_to_threshold(o.reports, cfg.threshold)
        runs.append({
            "seed": o.seed,
            "csv": f"seed_{o.seed}.csv",
            "rounds": len(o.reports),
            "final": {m: _json_num(getattr(last, m)) for m in FINAL_METRICS},
            "steps_to_threshold": steps,
            "within_budget": None if cfg.budget is None else steps is not None and steps <= cfg.budget,
            "recovery_steps": steps_to_threshold(o.reports, cfg.threshold, after) if after else None,
            "bound_violations": sum(not r.bound_satisfied for r in o.reports),
        })
    mean, std = {}, {}
    for m in FINAL_METRICS:
        vals = np.array([np.nan if r["final"][m] is None else r["final"][m] for r in runs], dtype=float)
        vals = vals[~np.isnan(vals)]
        mean[m] = _json_num(vals.mean()) if vals.size else None
        std[m] = _json_num(vals.std()) if vals.size else None
    return {
        "config": config_to_dict(cfg),
        "mode": "empirical" if use_emp else "exact",
        "threshold": cfg.threshold,
        "budget": cfg.budget,
        "seeds": [o.seed for o in outcomes],
        "runs": runs,
        "final_mean": mean,
        "final_std": std,
        "failures": failures,
    }


def plot_data(outcomes: list[SeedOutcome]) -> dict:
    curves = []
    for o in outcomes:
        if o.error is not None:
            continue
        curves.append({
            "seed": o.seed,
            "env_steps": [r.env_steps for r in o.reports],
            "true_return_ratio": [_json_num(r.true_return_ratio) for r in o.reports],
        })
    out = {"x": "env_steps", "y": "true_return_ratio", "curves": curves}
    if curves:
        ys = np.array([[np.nan if v is None else v for v in c["true_return_ratio"]] for c in curves], dtype=float)
        with np.errstate(all="ignore"):
            out["mean"] = {
                "env_steps": curves[0]["env_steps"],
                "true_return_ratio": [_json_num(v) for v in np.nanmean(ys, axis=0)] if not np.isnan(ys).all() else [],
                "std": [_json_num(v) for v in np.nanstd(ys, axis=0)] if not np.isnan(ys).all() else [],
            }
    return out


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_outputs(cfg: ExperimentConfig, outcomes: list[SeedOutcome], out_dir, empirical: bool | None = None) -> dict:
    out_dir = Path(out_dir)
    if "csv" in cfg.emit:
        for o in outcomes:
            if o.error is None:
                atomic_write(out_dir / f"seed_{o.seed}.csv", reports_to_csv(o.reports))
    summary = summarize(cfg, outcomes, empirical)
    if "json_summary" in cfg.emit:
        atomic_write(out_dir / "summary.json", dumps_json(summary))
    if "plot_data" in cfg.emit:
        atomic_write(out_dir / "plot_data.json", dumps_json(plot_data(outcomes)))
    return summary


# -- certificate sweep ---------------------------------------------------------------

def _random_instance(rng: np.random.Generator, max_states: int, max_actions: int, gammas):
    n_s = int(rng.integers(1, max_states + 1))
    n_a = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.choice(np.asarray(gammas, dtype=float)))
    mdp = random_mdp(n_s, n_a, seed=rng, gamma=gamma)
    pi = Policy(rng.dirichlet(np.full(n_a, 0.5), size=n_s))
    pi_e = Policy(rng.dirichlet(np.full(n_a, 0.5), size=n_s))
    expert = exact_visitation(mdp, pi_e, with_time_marginals=False)
    agent = exact_visitation(mdp, pi, with_time_marginals=False)
    k = mdp.r_max
    if rng.random() < 0.5:
        reward = RewardFn.tabular(n_s, n_a, STATE_ACTION, 0.0).with_params(
            np.vstack([rng.uniform(-k, 2 * k, size=(n_s, n_a)), np.zeros((1, n_a))]))
    else:
        # near the ranking optimum, where the bound is tight
        base = closed_form_reward(agent, expert, k)
        noise = rng.normal(scale=10.0 ** rng.uniform(-6, -1), size=base.params.shape)
        noise[-1] = 0.0
        reward = base.with_params(base.params + noise)
    return mdp, pi, reward, expert, k


def certificate_sweep(n_instances: int = 100, max_states: int = 20, max_actions: int = 4,
                      gammas=(0.9, 0.99), seed: int = 0) -> list[GameReport]:
    """Certificate on random (MDP, policy, reward, expert) instances."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        mdp, pi, reward, expert, k = _random_instance(rng, max_states, max_actions, gammas)
        out.append(theorem1_certificate(mdp, pi, reward, expert, k, round=i))
    return out


# -- comparisons -------------------------------------------------------------------

def scenario_key(spec: ScenarioSpec) -> str:
    return json.dumps(config_to_dict(spec), sort_keys=True)


def compare_configs(configs: list[ExperimentConfig], seed_offset: int = 0, empirical: bool | None = None,
                    threads: int | None = None, names=None) -> dict:
    """Run every variant on identical seeds and tabulate steps-to-threshold."""
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    key = scenario_key(configs[0].scenario)
    for i, c in enumerate(configs[1:], start=1):
        if scenario_key(c.scenario) != key:
            raise ValueError(f"config {i}: scenario differs from config 0")
    names = list(names) if names is not None else [f"variant_{i}" for i in range(len(configs))]
    threshold = configs[0].threshold
    seeds = [configs[0].game.seed + seed_offset + i for i in range(configs[0].repeats)]
    table = {"threshold": threshold, "seeds": seeds, "variants": []}
    for name, c in zip(names, configs):
        c = replace(c, repeats=len(seeds), threshold=threshold,
                    game=replace(c.game, seed=configs[0].game.seed))
        outcomes = run_seeds(c, seed_offset, empirical, threads)
        after = recovery_round(c)
        steps, recovery, errors = [], [], []
        for o in outcomes:
            if o.error is not None:
                errors.append({"seed": o.seed, "error": o.error})
                steps.append(None)
                recovery.append(None)
                continue
            steps.append(steps_to_threshold(o.reports, threshold))
            recovery.append(steps_to_threshold(o.reports, threshold, after) if after else None)
        table["variants"].append({
            "name": name,
            "leader": c.game.leader,
            "loss_kind": c.game.loss_kind,
            "steps_to_threshold": steps,
            "recovery_steps": recovery,
            "failures": errors,
        })
    return table


def format_compare(table: dict) -> str:
    rows = [["variant", "leader", "loss"] + [f"seed {s}" for s in table["seeds"]]]
    show_recovery = any(any(v is not None for v in var["recovery_steps"]) for var in table["variants"])
    for var in table["variants"]:
        cells = ["-" if v is None else str(v) for v in var["steps_to_threshold"]]
        rows.append([var["name"], var["leader"], var["loss_kind"]] + cells)
        if show_recovery:
            cells = ["-" if v is None else str(v) for v in var["recovery_steps"]]
            rows.append([var["name"] + " (recovery)", var["leader"], var["loss_kind"]] + cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
