"""Two-player ranking game loops and the analytic leader gradient.

PAL (policy as leader): the policy takes a few soft improvement steps per
round, the ranking dataset holds only the current round's comparison, and
the reward is fit to convergence. RAL (reward as leader): the policy takes
many steps per round, comparisons are aggregated across rounds, and the
reward takes a number of gradient steps proportional to the dataset size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .diagnostics import theorem1_certificate
from .mdp import (
    Policy,
    TabularMdp,
    Visitation,
    empirical_visitation,
    exact_visitation,
    hard_value_iteration,
    policy_return,
    sample_trajectories,
    state_transition,
)
from .ranking import (
    FitConfig,
    RankingChain,
    RankingDataset,
    RankingPair,
    ShapingFamily,
    Snippets,
    auto_chain,
    fit_reward,
    ground_chain,
)
from .reward import DEFAULT_CLAMP, STATE_ACTION, STATE_ONLY, RewardFn

LEADERS = ("policy", "reward")
GAME_LOSSES = ("supremum", "lk", "slk_auto", "offline")
_FIT_KIND = {"supremum": "supremum", "lk": "lk", "slk_auto": "slk", "offline": "offline"}


@dataclass
class GameConfig:
    """Hyperparameters of one game run.

    ``n_pol`` defaults to the horizon. ``batch_size`` is the reward batch
    size b; RAL takes ceil(|D| / b) reward steps with |D| counted in
    transitions. ``policy_lr`` is the relaxation of each soft Bellman step
    taken by the policy player.
    """

    leader: str = "policy"
    loss_kind: str = "lk"
    k: float | None = None
    n_pol: int | None = None
    n_rew: int | None = None
    p: int = 5
    shaping: ShapingFamily = field(default_factory=ShapingFamily)
    lam: float = 0.3
    temperature: float = 0.1
    policy_lr: float = 0.5
    ral_policy_factor: int = 4
    rounds: int = 100
    seed: int = 0
    use_empirical: bool = False
    rollouts_per_round: int = 1
    reward_lr: float = 1e-3
    l2: float = 1e-4
    clamp_range: tuple[float, float] = DEFAULT_CLAMP
    batch_size: int = 1024
    reward_solver: str | None = None
    reward_tol: float = 1e-6
    warm_start: bool = True
    snippet_len: int = 10
    snippet_weight: float = 1.0

    def __post_init__(self):
        if self.leader not in LEADERS:
            raise ValueError(f"leader must be one of {LEADERS}, got {self.leader!r}")
        if self.loss_kind not in GAME_LOSSES:
            raise ValueError(f"loss_kind must be one of {GAME_LOSSES}, got {self.loss_kind!r}")
        for name in ("rounds", "p", "ral_policy_factor", "rollouts_per_round", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_pol", "n_rew"):
            val = getattr(self, name)
            if val is not None and int(val) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.policy_lr <= 1:
            raise ValueError("policy_lr must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.k is not None and not self.k > 0:
            raise ValueError("k must be positive")
        if self.reward_solver not in (None, "exact", "adam", "sgd"):
            raise ValueError(f"unknown reward_solver {self.reward_solver!r}")

    def solver(self) -> str:
        if self.reward_solver is not None:
            return self.reward_solver
        return "exact" if self.leader == "policy" else "adam"


@dataclass
class SoftQPlayer:
    """Tabular stand-in for the soft actor-critic policy player.

    Each update step is a relaxed soft Bellman backup
    ``Q <- Q + lr * (T_R Q - Q)`` warm-started from the previous round, so
    the number of steps per round sets the player's timescale.
    """

    n_states: int
    n_actions: int
    temperature: float = 0.1
    lr: float = 0.5
    q: np.ndarray | None = None

    def __post_init__(self):
        if self.q is None:
            self.q = np.zeros((self.n_states, self.n_actions))

    def update(self, mdp: TabularMdp, reward_table: np.ndarray, n_steps: int) -> None:
        tau = self.temperature
        for _ in range(n_steps):
            v = tau * logsumexp(self.q / tau, axis=1)
            self.q += self.lr * (reward_table + mdp.gamma * mdp.transition @ v - self.q)

    def policy(self) -> Policy:
        return Policy(softmax(self.q / self.temperature, axis=1))


@dataclass
class GameState:
    policy: Policy
    reward: RewardFn
    online_dataset: RankingDataset
    round: int = 0
    history: list = field(default_factory=list)
    env_steps: int = 0
    player: SoftQPlayer | None = None


def two_timescale_schedule(config: GameConfig, horizon: int, round_index: int = 1,
                           dataset_size: int | None = None) -> tuple[int, int]:
    """(policy steps, reward steps) for one round.

    PAL is round-independent: (n_pol, n_rew) with defaults (H, ceil(H/b)).
    RAL takes ral_policy_factor * n_pol policy steps and ceil(|D|/b) reward
    steps, |D| defaulting to round_index * rollouts_per_round * H transitions.
    """
    n_pol = config.n_pol or horizon
    b = config.batch_size
    if config.leader == "policy":
        return n_pol, config.n_rew or max(1, math.ceil(horizon / b))
    if dataset_size is None:
        dataset_size = round_index * config.rollouts_per_round * horizon
    return n_pol * config.ral_policy_factor, max(1, math.ceil(dataset_size / b))


RoundHook = Callable[[int, TabularMdp, Visitation, Policy | None], "tuple | None"]


def _true_ratio(mdp: TabularMdp, pi: Policy, expert_policy: Policy | None) -> float:
    if mdp.true_reward is None:
        return float("nan")
    if expert_policy is None:
        _, j_expert = hard_value_iteration(mdp, mdp.true_reward)
    else:
        j_expert = policy_return(mdp, expert_policy, mdp.true_reward)
    if j_expert <= 0:
        return float("nan")
    return policy_return(mdp, pi, mdp.true_reward) / j_expert


def _run_game(mdp: TabularMdp, expert: Visitation, config: GameConfig, leader: str,
              offline_chain: RankingChain | None, snippets: Snippets | None,
              expert_policy: Policy | None, on_round: RoundHook | None,
              init_reward: RewardFn | None) -> GameState:
    if config.leader != leader:
        raise ValueError(f"config.leader is {config.leader!r} but this loop needs {leader!r}")
    if config.loss_kind == "offline" and offline_chain is None:
        raise ValueError("loss_kind 'offline' needs an offline chain")
    k = float(config.k if config.k is not None else mdp.r_max)
    family = replace(config.shaping, k_max=k)
    kind = STATE_ONLY if expert.state_only else STATE_ACTION
    reward0 = init_reward or RewardFn.tabular(mdp.n_states, mdp.n_actions, kind, 0.0, config.clamp_range)
    reward = reward0
    player = SoftQPlayer(mdp.n_states, mdp.n_actions, config.temperature, config.policy_lr)
    rng = np.random.default_rng(config.seed)
    H = mdp.horizon
    dataset = RankingDataset()
    grounded = None
    state = GameState(player.policy(), reward, dataset, player=player)

    for m in range(1, config.rounds + 1):
        if on_round is not None:
            changed = on_round(m, mdp, expert, expert_policy)
            if changed is not None:
                mdp, expert, expert_policy = changed
                grounded = None
        if grounded is None and offline_chain is not None:
            grounded = ground_chain(offline_chain, expert, k)

        batch = config.rollouts_per_round * H
        n_pol, _ = two_timescale_schedule(config, H, m, (len(dataset) + 1) * batch)
        player.update(mdp, reward.mdp_table(mdp.n_actions), n_pol)
        pi = player.policy()

        if config.use_empirical:
            trajs = sample_trajectories(mdp, pi, config.rollouts_per_round, seed=rng)
            agent = empirical_visitation(trajs, mdp)
        else:
            agent = exact_visitation(mdp, pi)
        state.env_steps += batch
        if expert.state_only:
            agent = agent.state_marginal()
        pair = RankingPair(agent, expert)
        dataset = RankingDataset([pair]) if leader == "policy" else dataset.add(pair)
        _, n_rew = two_timescale_schedule(config, H, m, len(dataset) * batch)

        chains = ()
        if config.loss_kind == "slk_auto":
            chains = tuple(auto_chain(p.lesser, p.greater, config.p, family, mdp.gamma) for p in dataset.pairs)
        elif config.loss_kind == "offline":
            chains = (grounded,)
        fit_cfg = FitConfig(
            lr=config.reward_lr, l2=config.l2, clamp_range=config.clamp_range, max_steps=n_rew,
            tol=config.reward_tol, solver=config.solver(), k=k, lam=config.lam,
            snippet_weight=config.snippet_weight,
        )
        start = reward if config.warm_start else reward0
        use_snips = snippets if config.loss_kind == "offline" and config.solver() != "exact" else None
        reward = fit_reward(RankingDataset(dataset.pairs, chains), start, _FIT_KIND[config.loss_kind],
                            fit_cfg, use_snips).reward

        report = theorem1_certificate(mdp, pi, reward, expert, k, round=m,
                                      true_return_ratio=_true_ratio(mdp, pi, expert_policy),
                                      env_steps=state.env_steps)
        state.history.append(report)
        state.policy, state.reward, state.online_dataset, state.round = pi, reward, dataset, m
    return state


def run_pal(mdp: TabularMdp, expert: Visitation, config: GameConfig, *, offline_chain=None, snippets=None,
            expert_policy=None, on_round: RoundHook | None = None, init_reward=None) -> GameState:
    """Policy-as-leader game: slow policy, fresh data, reward fit to convergence."""
    return _run_game(mdp, expert, config, "policy", offline_chain, snippets, expert_policy, on_round, init_reward)


def run_ral(mdp: TabularMdp, expert: Visitation, config: GameConfig, *, offline_chain=None, snippets=None,
            expert_policy=None, on_round: RoundHook | None = None, init_reward=None) -> GameState:
    """Reward-as-leader game: fast policy, aggregated data, size-scaled reward steps."""
    return _run_game(mdp, expert, config, "reward", offline_chain, snippets, expert_policy, on_round, init_reward)


def run_game(mdp: TabularMdp, expert: Visitation, config: GameConfig, **kwargs) -> GameState:
    runner = run_pal if config.leader == "policy" else run_ral
    return runner(mdp, expert, config, **kwargs)


# -- analytic leader gradient ------------------------------------------------------

@dataclass(frozen=True)
class LeaderGradient:
    total: np.ndarray
    direct: np.ndarray
    indirect: np.ndarray


def occupancy_jacobian(mdp: TabularMdp, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Occupancy ``rho`` and its Jacobians w.r.t. softmax policy logits.

    Returns ``(rho, d_rho, d_state)`` where ``d_rho`` has shape (S*A, S*A)
    and ``d_state`` (S, S*A), both obtained by differentiating the flow
    system ``(I - gamma P_pi^T) d = (1 - gamma) rho0``.
    """
    S, A = mdp.n_states, mdp.n_actions
    pi = Policy.from_logits(logits)
    probs = pi.probs
    P = mdp.transition
    P_pi = state_transition(mdp, pi)
    M = np.eye(S) - mdp.gamma * P_pi.T
    d = np.linalg.solve(M, (1.0 - mdp.gamma) * np.asarray(mdp.rho0))
    # B[s', (s, b)] = gamma d(s) pi(b|s) (P(s, b, s') - P_pi(s, s'))
    B = mdp.gamma * (d[:, None, None] * probs[:, :, None] * (P - P_pi[:, None, :]))
    B = B.reshape(S * A, S).T
    d_state = np.linalg.solve(M, B)
    # dpi(a|s)/dtheta(s, b) = pi(a|s) (delta_ab - pi(b|s))
    dpi = np.zeros((S, A, S, A))
    for s in range(S):
        dpi[s, :, s, :] = np.diag(probs[s]) - np.outer(probs[s], probs[s])
    d_rho = d_state[:, None, :].repeat(A, axis=1) * probs[:, :, None] + d[:, None, None] * dpi.reshape(S, A, S * A)
    rho = d[:, None] * probs
    return rho, d_rho.reshape(S * A, S * A), d_state


def _best_response_reward(rho: np.ndarray, expert: np.ndarray, k: float) -> tuple[np.ndarray, np.ndarray]:
    denom = rho + expert
    safe = np.where(denom > 0, denom, 1.0)
    r = np.where(denom > 0, k * expert / safe, 0.5 * k)
    dr = np.where(denom > 0, -k * expert / safe ** 2, 0.0)
    return r, dr


def pal_leader_objective(mdp: TabularMdp, logits: np.ndarray, expert: Visitation, k: float) -> float:
    """J(R*(pi); pi) with R* the reward player's exact best response."""
    pi = Policy.from_logits(logits)
    rho = exact_visitation(mdp, pi, with_time_marginals=False).rho
    e = expert.rho[: mdp.n_states]
    if expert.state_only:
        rho = rho.sum(axis=1)
    r, _ = _best_response_reward(rho, e, k)
    return float(np.sum(rho * r) / (1.0 - mdp.gamma))


def leader_gradient_pal_analytic(mdp: TabularMdp, pi: Policy | np.ndarray, expert: Visitation,
                                 k: float) -> LeaderGradient:
    """Total derivative of the PAL leader objective w.r.t. policy logits.

    The follower's best response is the unclamped tabular minimizer
    R*(s, a) = k rho_E / (rho_E + rho_pi). The gradient splits into a direct
    term (reward held fixed) and an indirect term through R*'s dependence
    on the agent occupancy.
    """
    logits = np.log(np.clip(pi.probs, 1e-300, None)) if isinstance(pi, Policy) else np.asarray(pi, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if S * A > 400:
        raise ValueError("analytic leader gradient is meant for tiny MDPs (S*A <= 400)")
    if expert.absorbing or expert.rho.shape[0] != S:
        raise ValueError("expert visitation must cover exactly the MDP's states")
    rho, d_rho, d_state = occupancy_jacobian(mdp, logits)
    scale = 1.0 / (1.0 - mdp.gamma)
    if expert.state_only:
        view, jac = rho.sum(axis=1), d_state
    else:
        view, jac = rho.ravel(), d_rho
    r, dr = _best_response_reward(view, np.asarray(expert.rho).ravel(), k)
    direct = scale * jac.T @ r
    indirect = scale * jac.T @ (view * dr)
    return LeaderGradient((direct + indirect).reshape(S, A), direct.reshape(S, A), indirect.reshape(S, A))
