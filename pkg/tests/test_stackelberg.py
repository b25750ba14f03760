import math

import numpy as np
import pytest

from rankgame.diagnostics import reports_to_csv
from rankgame.envs import bandit, build_env, gridworld, random_mdp, ScenarioSpec
from rankgame.mdp import Policy, Visitation, exact_visitation
from rankgame.ranking import ONLINE, RankingChain, closed_form_reward
from rankgame.stackelberg import (
    GameConfig,
    SoftQPlayer,
    leader_gradient_pal_analytic,
    occupancy_jacobian,
    pal_leader_objective,
    run_game,
    run_pal,
    run_ral,
    two_timescale_schedule,
)

from helpers import random_policy


@pytest.fixture(scope="module")
def grid():
    mdp, expert, pi_e = build_env(ScenarioSpec("gridworld", width=4, height=4, slip=0.1, n_expert_trajectories=0))
    return mdp, expert, pi_e


def test_config_validation():
    with pytest.raises(ValueError, match="leader"):
        GameConfig(leader="both")
    with pytest.raises(ValueError, match="loss_kind"):
        GameConfig(loss_kind="bce")
    with pytest.raises(ValueError, match="rounds"):
        GameConfig(rounds=0)
    with pytest.raises(ValueError, match="temperature"):
        GameConfig(temperature=0.0)
    with pytest.raises(ValueError, match="policy_lr"):
        GameConfig(policy_lr=1.5)


def test_default_solvers():
    assert GameConfig(leader="policy").solver() == "exact"
    assert GameConfig(leader="reward").solver() == "adam"
    assert GameConfig(leader="reward", reward_solver="sgd").solver() == "sgd"


def test_schedule_pal_defaults():
    cfg = GameConfig(leader="policy", batch_size=8)
    assert two_timescale_schedule(cfg, 20) == (20, math.ceil(20 / 8))
    assert two_timescale_schedule(cfg, 20, round_index=7) == (20, 3)
    assert two_timescale_schedule(GameConfig(leader="policy", batch_size=1024), 20) == (20, 1)


@pytest.mark.parametrize("m", [1, 3, 10])
def test_schedule_ral_grows_with_dataset(m):
    H, b = 20, 16
    cfg = GameConfig(leader="reward", batch_size=b, ral_policy_factor=4)
    n_pol, n_rew = two_timescale_schedule(cfg, H, round_index=m)
    assert n_pol == 4 * H
    assert n_rew == math.ceil(m * H / b)


def test_schedule_explicit_overrides():
    cfg = GameConfig(leader="policy", n_pol=3, n_rew=7)
    assert two_timescale_schedule(cfg, 50) == (3, 7)


def test_soft_q_player_converges_to_soft_optimum():
    mdp = bandit(2, gamma=0.5)
    player = SoftQPlayer(1, 2, temperature=0.1, lr=1.0)
    player.update(mdp, mdp.true_reward, 200)
    probs = player.policy().probs[0]
    assert probs[0] == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-9)


def test_single_round_contract(grid):
    mdp, expert, pi_e = grid
    for leader in ("policy", "reward"):
        state = run_game(mdp, expert, GameConfig(leader=leader, rounds=1), expert_policy=pi_e)
        assert len(state.history) == 1 and state.round == 1
        assert state.env_steps == mdp.horizon
        assert len(state.online_dataset) == 1


def test_pal_keeps_only_current_pair(grid):
    mdp, expert, pi_e = grid
    state = run_pal(mdp, expert, GameConfig(leader="policy", rounds=6), expert_policy=pi_e)
    assert len(state.online_dataset) == 1
    assert state.online_dataset.pairs[0].source == ONLINE


def test_ral_aggregates_pairs(grid):
    mdp, expert, pi_e = grid
    state = run_ral(mdp, expert, GameConfig(leader="reward", rounds=5, reward_solver="sgd", reward_lr=0.5,
                                            batch_size=20), expert_policy=pi_e)
    assert len(state.online_dataset) == 5
    assert [r.env_steps for r in state.history] == [mdp.horizon * m for m in range(1, 6)]


def test_leader_mismatch_rejected(grid):
    mdp, expert, _ = grid
    with pytest.raises(ValueError, match="leader"):
        run_pal(mdp, expert, GameConfig(leader="reward"))


def test_offline_needs_chain(grid):
    mdp, expert, _ = grid
    with pytest.raises(ValueError, match="offline chain"):
        run_pal(mdp, expert, GameConfig(loss_kind="offline"))


def test_pal_reward_is_closed_form(grid):
    mdp, expert, pi_e = grid
    state = run_pal(mdp, expert, GameConfig(rounds=3, l2=0.0, warm_start=False), expert_policy=pi_e)
    pair = state.online_dataset.pairs[0]
    cf = closed_form_reward(pair.lesser, pair.greater, mdp.r_max)
    rows = pair.lesser.rho.shape[0]
    assert np.max(np.abs(state.reward.values()[:rows] - cf.values()[:rows])) <= 1e-6


def test_matched_expert_converges_in_one_round(grid):
    mdp, _, _ = grid
    expert = exact_visitation(mdp, Policy.uniform(mdp.n_states, mdp.n_actions))
    state = run_pal(mdp, expert, GameConfig(rounds=1, l2=0.0))
    rep = state.history[0]
    assert rep.f_divergence <= 1e-6
    assert rep.eps_r <= 1e-6
    assert rep.bound_satisfied


@pytest.mark.parametrize("leader,loss", [("policy", "lk"), ("policy", "slk_auto"), ("policy", "supremum"),
                                         ("reward", "lk"), ("reward", "slk_auto")])
def test_certificate_every_round(grid, leader, loss):
    mdp, expert, pi_e = grid
    cfg = GameConfig(leader=leader, loss_kind=loss, rounds=8, temperature=0.02, policy_lr=0.3,
                     reward_solver="sgd" if leader == "reward" else None, reward_lr=0.5, batch_size=20)
    state = run_game(mdp, expert, cfg, expert_policy=pi_e)
    assert all(r.bound_satisfied for r in state.history)


def test_pal_learns_gridworld(grid):
    mdp, expert, pi_e = grid
    state = run_pal(mdp, expert, GameConfig(rounds=10, temperature=0.02, policy_lr=0.3), expert_policy=pi_e)
    assert state.history[-1].true_return_ratio >= 0.9


def test_offline_game_runs_with_chain(grid):
    mdp, expert, pi_e = grid
    chain = RankingChain([exact_visitation(mdp, Policy.uniform(mdp.n_states, mdp.n_actions))], [0.0])
    state = run_pal(mdp, expert, GameConfig(loss_kind="offline", rounds=3, lam=0.0), offline_chain=chain,
                    expert_policy=pi_e)
    assert len(state.history) == 3


def test_empirical_mode_is_seeded(grid):
    mdp, expert, pi_e = grid
    cfg = GameConfig(rounds=4, use_empirical=True, seed=3)
    a = reports_to_csv(run_pal(mdp, expert, cfg, expert_policy=pi_e).history)
    b = reports_to_csv(run_pal(mdp, expert, cfg, expert_policy=pi_e).history)
    assert a == b


def test_exact_runs_are_deterministic(grid):
    mdp, expert, pi_e = grid
    cfg = GameConfig(leader="reward", rounds=4, loss_kind="slk_auto")
    a = reports_to_csv(run_ral(mdp, expert, cfg, expert_policy=pi_e).history)
    b = reports_to_csv(run_ral(mdp, expert, cfg, expert_policy=pi_e).history)
    assert a == b


def test_round_hook_swaps_environment(grid):
    mdp, expert, pi_e = grid
    other, other_expert, other_pi = build_env(ScenarioSpec("gridworld", width=4, height=4, goal=(3, 0),
                                                           n_expert_trajectories=0))
    seen = []

    def hook(m, cur, e, p):
        seen.append(cur is other)
        if m == 3:
            return other, other_expert, other_pi
        return None

    run_pal(mdp, expert, GameConfig(rounds=4), expert_policy=pi_e, on_round=hook)
    assert seen == [False, False, False, True]


# -- leader gradient -------------------------------------------------------------

def _fd_grad(mdp, logits, expert, k, h=1e-5):
    g = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        d = np.zeros_like(logits)
        d[idx] = h
        g[idx] = (pal_leader_objective(mdp, logits + d, expert, k)
                  - pal_leader_objective(mdp, logits - d, expert, k)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-9)


@pytest.mark.parametrize("state_only", [False, True])
def test_leader_gradient_matches_finite_differences(rng, state_only):
    for seed in range(20):
        n_s, n_a = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        mdp = random_mdp(n_s, n_a, seed=seed, gamma=float(rng.choice([0.5, 0.9])))
        expert = exact_visitation(mdp, random_policy(rng, n_s, n_a), with_time_marginals=False)
        if state_only:
            expert = expert.state_marginal()
        logits = rng.normal(size=(n_s, n_a))
        grad = leader_gradient_pal_analytic(mdp, logits, expert, 1.0)
        assert _rel_err(grad.total, _fd_grad(mdp, logits, expert, 1.0)) <= 1e-5
        np.testing.assert_allclose(grad.total, grad.direct + grad.indirect)


def test_leader_gradient_at_matched_fixed_point(rng):
    mdp = random_mdp(3, 2, seed=4)
    logits = rng.normal(size=(3, 2))
    expert = exact_visitation(mdp, Policy.from_logits(logits), with_time_marginals=False)
    grad = leader_gradient_pal_analytic(mdp, logits, expert, 2.0)
    assert _rel_err(grad.total, _fd_grad(mdp, logits, expert, 2.0)) <= 1e-5 or np.linalg.norm(grad.total) < 1e-9


def test_leader_gradient_bandit_sign_from_oracle():
    mdp = bandit(2, gamma=0.5)
    expert = Visitation(np.array([[1.0, 0.0]]))
    logits = np.zeros((1, 2))
    grad = leader_gradient_pal_analytic(mdp, logits, expert, 1.0)
    fd = _fd_grad(mdp, logits, expert, 1.0)
    np.testing.assert_allclose(grad.total, fd, rtol=1e-5, atol=1e-10)
    assert np.sign(grad.total[0, 0]) == np.sign(fd[0, 0]) and grad.total[0, 0] > 0


def test_indirect_term_ignores_zero_expert_mass(rng):
    mdp = random_mdp(3, 2, seed=2)
    table = np.zeros((3, 2))
    table[0, 1] = 0.6
    table[2, 0] = 0.4
    expert = Visitation(table)
    logits = rng.normal(size=(3, 2))
    grad = leader_gradient_pal_analytic(mdp, logits, expert, 1.0)
    rho, d_rho, _ = occupancy_jacobian(mdp, logits)
    mask = table.ravel() > 0
    e, r = table.ravel()[mask], rho.ravel()[mask]
    expected = d_rho[mask].T @ (r * -e / (r + e) ** 2) / (1 - mdp.gamma)
    np.testing.assert_allclose(grad.indirect.ravel(), expected, atol=1e-12)


def test_leader_gradient_rejects_large_or_padded_inputs():
    mdp = random_mdp(3, 2, seed=0)
    padded = Visitation(np.full((4, 2), 1 / 8), absorbing=True)
    with pytest.raises(ValueError, match="expert"):
        leader_gradient_pal_analytic(mdp, np.zeros((3, 2)), padded, 1.0)
    big = gridworld(21, 20)
    with pytest.raises(ValueError, match="tiny"):
        leader_gradient_pal_analytic(big, np.zeros((420, 4)), Visitation(np.full((420, 4), 1 / 1680)), 1.0)


@pytest.fixture(scope="module")
def grid5():
    return build_env(ScenarioSpec("gridworld", width=5, height=5, slip=0.1, n_expert_trajectories=1))


def test_long_pal_run_certified_every_round(grid5):
    mdp, expert, pi_e = grid5
    state = run_pal(mdp, expert, GameConfig(rounds=200, temperature=0.02, policy_lr=0.3), expert_policy=pi_e)
    assert len(state.history) == 200
    assert all(r.bound_satisfied for r in state.history)
    last = state.history[-1]
    assert last.f_divergence <= last.bound_rhs


def test_ral_run_certified_at_final_round(grid5):
    mdp, expert, pi_e = grid5
    cfg = GameConfig(leader="reward", rounds=20, temperature=0.02, policy_lr=0.3, reward_solver="sgd",
                     reward_lr=0.5, batch_size=20)
    state = run_ral(mdp, expert, cfg, expert_policy=pi_e)
    assert state.history[-1].bound_satisfied
    assert len(state.online_dataset) == 20
