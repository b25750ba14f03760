"""Benchmark MDPs, expert synthesis and nonstationary scenario mutations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mdp import (
    Policy,
    TabularMdp,
    Visitation,
    empirical_visitation,
    exact_visitation,
    hard_value_iteration,
    sample_trajectories,
    soft_value_iteration,
)
from .ranking import RankingChain, ShapingFamily, shape_targets

ENV_KINDS = ("gridworld", "chain", "random", "bandit")
# gridworld action order: up, down, left, right
_MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))


@dataclass
class MutationSpec:
    """A scenario change applied at the start of round ``round``.

    ``intent_change`` moves the goal (gridworld/chain) and swaps in the new
    expert. ``dynamics_change`` perturbs the transition tensor by
    ``dynamics`` = ``identity`` | ``slip`` (mix toward a random action with
    weight ``amount``) | ``permute_actions`` (``permutation``) | ``noise``
    (add ``amount`` * ``perturbation`` and renormalize).
    """

    kind: str
    round: int
    new_goal: tuple | int | None = None
    dynamics: str = "identity"
    amount: float = 0.0
    permutation: tuple | None = None
    perturbation: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("intent_change", "dynamics_change"):
            raise ValueError(f"unknown mutation kind {self.kind!r}")
        if self.dynamics not in ("identity", "slip", "permute_actions", "noise"):
            raise ValueError(f"unknown dynamics perturbation {self.dynamics!r}")
        if self.round < 1:
            raise ValueError("mutation round must be >= 1")


@dataclass
class ScenarioSpec:
    """Environment and expert description.

    ``n_expert_trajectories = 0`` uses the expert's exact occupancy;
    otherwise the expert visitation is estimated from that many rollouts.
    """

    env_kind: str = "gridworld"
    width: int = 5
    height: int = 5
    goal: tuple | int | None = None
    start: tuple | int | None = None
    slip: float = 0.0
    n: int = 10
    n_states: int = 10
    n_actions: int = 3
    gamma: float = 0.9
    horizon: int | None = None
    r_max: float = 1.0
    expert_source: str = "optimal_under_true_reward"
    expert_policy: np.ndarray | None = None
    n_expert_trajectories: int = 1
    lfo: bool = False
    mutation: MutationSpec | None = None
    seed: int = 0
    chain_reset: bool = False

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ValueError(f"env_kind must be one of {ENV_KINDS}, got {self.env_kind!r}")
        if not 0.0 <= self.slip < 1.0:
            raise ValueError("slip must lie in [0, 1)")
        if self.expert_source not in ("optimal_under_true_reward", "provided_policy"):
            raise ValueError(f"unknown expert_source {self.expert_source!r}")
        if self.expert_source == "provided_policy" and self.expert_policy is None:
            raise ValueError("expert_source 'provided_policy' needs expert_policy")
        if self.n_expert_trajectories < 0:
            raise ValueError("n_expert_trajectories must be >= 0")


# -- environment constructors ------------------------------------------------------

def default_horizon(gamma: float, min_steps: int, tail: float = 1e-2) -> int:
    """At least ``min_steps`` and long enough that gamma**H <= tail.

    Empirical visitations are truncated at H while exact ones are not; a
    short horizon would bias every expert-vs-agent comparison.
    """
    if gamma <= 0:
        return max(1, min_steps)
    return max(min_steps, math.ceil(math.log(tail) / math.log(gamma)))


def gridworld(width: int, height: int, goal=None, start=(0, 0), slip: float = 0.0, gamma: float = 0.9,
              horizon: int | None = None, r_max: float = 1.0) -> TabularMdp:
    """Sparse-reward gridworld; the goal is absorbing and pays r_max per step."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    goal = (width - 1, height - 1) if goal is None else tuple(goal)
    start = (0, 0) if start is None else tuple(start)
    S, A = width * height, len(_MOVES)
    idx = lambda x, y: y * width + x  # noqa: E731
    for name, (x, y) in (("goal", goal), ("start", start)):
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"{name} {(x, y)} outside the {width}x{height} grid")
    move = np.zeros((S, A, S))
    for y in range(height):
        for x in range(width):
            s = idx(x, y)
            for a, (dx, dy) in enumerate(_MOVES):
                nx, ny = min(max(x + dx, 0), width - 1), min(max(y + dy, 0), height - 1)
                move[s, a, idx(nx, ny)] = 1.0
    P = (1.0 - slip) * move + slip * move.mean(axis=1, keepdims=True)
    g = idx(*goal)
    P[g] = 0.0
    P[g, :, g] = 1.0
    rho0 = np.zeros(S)
    rho0[idx(*start)] = 1.0
    R = np.zeros((S, A))
    R[g] = r_max
    horizon = horizon or default_horizon(gamma, 2 * (width + height))
    return TabularMdp(P, gamma, rho0, horizon, r_max, R)


def chain(n: int, slip: float = 0.0, gamma: float = 0.9, horizon: int | None = None, r_max: float = 1.0,
          goal: int | None = None, reset: bool = False) -> TabularMdp:
    """Chain of n states; action 1 steps right, action 0 steps left (or resets to 0).

    The goal state (default n-1) is absorbing and pays r_max.
    """
    if n < 2:
        raise ValueError("chain needs at least 2 states")
    goal = n - 1 if goal is None else int(goal)
    P = np.zeros((n, 2, n))
    for s in range(n):
        left = 0 if reset else max(s - 1, 0)
        right = min(s + 1, n - 1)
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
    P[goal] = 0.0
    P[goal, :, goal] = 1.0
    rho0 = np.zeros(n)
    rho0[0] = 1.0
    R = np.zeros((n, 2))
    R[goal] = r_max
    return TabularMdp(P, gamma, rho0, horizon or default_horizon(gamma, 2 * n), r_max, R)


def random_mdp(n_states: int, n_actions: int, seed=None, gamma: float = 0.9, horizon: int = 20,
               r_max: float = 1.0) -> TabularMdp:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    R = rng.uniform(0.0, r_max, size=(n_states, n_actions))
    return TabularMdp(P, gamma, rho0, horizon, r_max, R)


def bandit(n_arms: int, gamma: float = 0.9, horizon: int = 10, r_max: float = 1.0) -> TabularMdp:
    """Single-state MDP; arm i pays r_max * (1 - i / (n_arms - 1))."""
    if n_arms < 1:
        raise ValueError("bandit needs at least one arm")
    P = np.ones((1, n_arms, 1))
    R = r_max * (1.0 - np.arange(n_arms) / max(n_arms - 1, 1))
    return TabularMdp(P, gamma, np.ones(1), horizon, r_max, R[None, :])


def _make_mdp(spec: ScenarioSpec, goal=None) -> TabularMdp:
    goal = spec.goal if goal is None else goal
    if spec.env_kind == "gridworld":
        return gridworld(spec.width, spec.height, goal, spec.start, spec.slip, spec.gamma, spec.horizon, spec.r_max)
    if spec.env_kind == "chain":
        return chain(spec.n, spec.slip, spec.gamma, spec.horizon, spec.r_max, goal, spec.chain_reset)
    if spec.env_kind == "random":
        return random_mdp(spec.n_states, spec.n_actions, spec.seed, spec.gamma, spec.horizon or 20, spec.r_max)
    return bandit(spec.n, spec.gamma, spec.horizon or 10, spec.r_max)


def expert_visitation(mdp: TabularMdp, expert_policy: Policy, n_trajectories: int, seed, lfo: bool) -> Visitation:
    if n_trajectories == 0:
        vis = exact_visitation(mdp, expert_policy)
    else:
        vis = empirical_visitation(sample_trajectories(mdp, expert_policy, n_trajectories, seed=seed), mdp)
    return vis.state_marginal() if lfo else vis


def build_env(spec: ScenarioSpec, seed=None) -> tuple[TabularMdp, Visitation, Policy]:
    """MDP with its true reward, the expert policy and the expert visitation."""
    seed = spec.seed if seed is None else seed
    mdp = _make_mdp(spec)
    if spec.expert_source == "provided_policy":
        pi_e = Policy(np.asarray(spec.expert_policy, dtype=float))
    else:
        pi_e, _ = hard_value_iteration(mdp, mdp.true_reward)
    return mdp, expert_visitation(mdp, pi_e, spec.n_expert_trajectories, seed, spec.lfo), pi_e


# -- mutations --------------------------------------------------------------------

def perturb_dynamics(mdp: TabularMdp, mutation: MutationSpec) -> TabularMdp:
    P = np.array(mdp.transition)
    if mutation.dynamics == "identity":
        return mdp
    if mutation.dynamics == "slip":
        P = (1.0 - mutation.amount) * P + mutation.amount * P.mean(axis=1, keepdims=True)
    elif mutation.dynamics == "permute_actions":
        perm = np.asarray(mutation.permutation if mutation.permutation is not None
                          else np.roll(np.arange(mdp.n_actions), 1))
        if sorted(perm.tolist()) != list(range(mdp.n_actions)):
            raise ValueError("permutation must reorder all actions")
        P = P[:, perm, :]
    else:
        if mutation.perturbation is None:
            raise ValueError("noise perturbation needs a perturbation tensor")
        P = P + mutation.amount * np.asarray(mutation.perturbation, dtype=float)
    if np.any(P < -1e-12):
        raise ValueError("perturbed transition has negative probabilities")
    P = np.clip(P, 0.0, None)
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(P, mdp.gamma, mdp.rho0, mdp.horizon, mdp.r_max, mdp.true_reward)


def apply_mutation(mdp: TabularMdp, spec: ScenarioSpec, round: int, expert: Visitation | None = None,
                   expert_policy: Policy | None = None):
    """Return ``(mdp, expert, expert_policy)`` after the mutation due at ``round``, else None.

    Intent changes rebuild the environment around the new goal and replace
    the expert. Dynamics changes keep the demonstration but re-solve the
    reference expert policy used for return ratios.
    """
    mut = spec.mutation
    if mut is None or round != mut.round:
        return None
    if mut.kind == "intent_change":
        new_mdp = _make_mdp(spec, goal=mut.new_goal)
        new_mdp = TabularMdp(new_mdp.transition, mdp.gamma, mdp.rho0, mdp.horizon, mdp.r_max, new_mdp.true_reward)
        pi_e, _ = hard_value_iteration(new_mdp, new_mdp.true_reward)
        vis = expert_visitation(new_mdp, pi_e, spec.n_expert_trajectories, spec.seed + 7919, spec.lfo)
        return new_mdp, vis, pi_e
    new_mdp = perturb_dynamics(mdp, mut)
    pi_e, _ = hard_value_iteration(new_mdp, new_mdp.true_reward)
    return new_mdp, expert, pi_e


def mutation_hook(spec: ScenarioSpec):
    """Adapter for the game loops' per-round callback."""
    def hook(m, mdp, expert, expert_policy):
        return apply_mutation(mdp, spec, m, expert, expert_policy)
    return hook


# -- offline preferences -------------------------------------------------------------

@dataclass
class OfflinePreferences:
    chain: RankingChain
    trajectories: list = field(default_factory=list)
    targets: np.ndarray | None = None
    policies: list = field(default_factory=list)


def make_offline_preferences(mdp: TabularMdp, true_reward=None, n_levels: int = 10, seed=None,
                             family: ShapingFamily | None = None, temperatures=None,
                             n_trajectories: int = 1, exact: bool = False,
                             lfo: bool = False, return_all: bool = False):
    """Graded-quality chain from soft value iteration at descending temperatures.

    The first level is the uniform policy and the last the greedy optimum,
    so the chain is grounded at r_max by the expert. Members are ordered by
    their true expected reward and get targets shaped at alpha = i/(n-1).
    """
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    R = mdp.true_reward if true_reward is None else np.asarray(true_reward, dtype=float)
    if R is None:
        raise ValueError("offline preferences need a true reward")
    family = family or ShapingFamily("linear", 0.0, mdp.r_max)
    family = replace(family, k_max=mdp.r_max)
    if temperatures is None:
        temperatures = np.geomspace(mdp.r_max, 1e-2 * mdp.r_max, n_levels - 2) if n_levels > 2 else []
    temperatures = list(temperatures)
    if len(temperatures) != n_levels - 2:
        raise ValueError("need n_levels - 2 intermediate temperatures")
    n_iters = max(1, int(np.ceil(np.log(1e-6) / np.log(max(mdp.gamma, 1e-3)))))
    policies = [Policy.uniform(mdp.n_states, mdp.n_actions)]
    policies += [soft_value_iteration(mdp, R, t, n_iters) for t in temperatures]
    policies.append(hard_value_iteration(mdp, R)[0])
    rng = np.random.default_rng(seed)
    members, trajs = [], []
    for pi in policies:
        if exact:
            vis, batch = exact_visitation(mdp, pi), []
        else:
            batch = sample_trajectories(mdp, pi, n_trajectories, seed=rng)
            vis = empirical_visitation(batch, mdp)
        members.append(vis.state_marginal() if lfo else vis)
        trajs.append(batch)
    quality = [float(np.sum(m.with_rows(mdp.n_states)[: mdp.n_states] * (R.sum(1) / R.shape[1] if lfo else R)))
               for m in members]
    order = sorted(range(n_levels), key=lambda i: (quality[i], i))
    alphas = np.arange(n_levels) / (n_levels - 1)
    targets = shape_targets(family, alphas)
    chain_ = RankingChain([members[i] for i in order], targets)
    if not return_all:
        return chain_
    flat_trajs, flat_targets = [], []
    for rank, i in enumerate(order):
        for tr in trajs[i]:
            flat_trajs.append(tr)
            flat_targets.append(targets[rank])
    return OfflinePreferences(chain_, flat_trajs, np.asarray(flat_targets), [policies[i] for i in order])
