import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankgame.diagnostics import (
    CSV_COLUMNS,
    GameReport,
    bound_rhs,
    f_divergence,
    measure_eps_pi,
    measure_eps_r,
    reports_from_csv,
    reports_to_csv,
    steps_to_threshold,
    theorem1_certificate,
)
from rankgame.envs import bandit, random_mdp
from rankgame.mdp import Policy, Visitation, exact_visitation, hard_value_iteration
from rankgame.ranking import RankingDataset, RankingPair, closed_form_reward
from rankgame.reward import RewardFn

from helpers import random_policy


def vis(table):
    return Visitation(np.asarray(table, dtype=float))


def test_f_divergence_identical_is_zero(rng):
    p = vis(rng.dirichlet(np.ones(6)))
    assert f_divergence(p, p) == 0.0


def test_f_divergence_disjoint_is_one():
    assert f_divergence(vis([0.0, 0.0, 1.0]), vis([0.3, 0.7, 0.0])) == pytest.approx(1.0)


def test_f_divergence_arithmetic():
    assert f_divergence(vis([0.5, 0.5]), vis([0.75, 0.25])) == pytest.approx(0.066667, abs=1e-6)


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_f_divergence_in_unit_interval(n, seed):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.full(n, 0.3))
    q = r.dirichlet(np.full(n, 0.3))
    d = f_divergence(vis(p), vis(q))
    assert -1e-12 <= d <= 1.0 + 1e-12
    assert d == pytest.approx(0.5 * np.sum((q - p) ** 2 / np.where(p + q > 0, p + q, 1.0)), abs=1e-12)


def test_f_divergence_requires_normalized():
    bad = Visitation.__new__(Visitation)
    object.__setattr__(bad, "rho", np.array([0.5, 0.2]))
    object.__setattr__(bad, "time_marginals", None)
    object.__setattr__(bad, "absorbing", False)
    with pytest.raises(ValueError, match="normalized"):
        f_divergence(bad, vis([0.5, 0.5]))


def test_bound_rhs_arithmetic():
    assert bound_rhs(0.9, 0.1, 0.05, 10.0) == pytest.approx(0.011)


def test_eps_pi_zero_for_optimal(small_mdp):
    R = RewardFn.from_table(small_mdp.true_reward)
    pi, _ = hard_value_iteration(small_mdp, R)
    assert abs(measure_eps_pi(small_mdp, pi, R)) <= 1e-8


def test_eps_pi_uniform_bandit():
    mdp = bandit(2, gamma=0.9)
    eps = measure_eps_pi(mdp, Policy.uniform(1, 2), mdp.true_reward)
    assert eps == pytest.approx(0.5 / (1 - 0.9))


def test_eps_pi_bounds_random(rng):
    for seed in range(10):
        mdp = random_mdp(6, 3, seed=seed)
        eps = measure_eps_pi(mdp, random_policy(rng, 6, 3), mdp.true_reward)
        assert -1e-9 <= eps <= mdp.r_max / (1 - mdp.gamma)


def test_eps_r_closed_form_and_offset(rng):
    a = vis(rng.dirichlet(np.ones(8)).reshape(4, 2))
    e = vis(rng.dirichlet(np.ones(8)).reshape(4, 2))
    ds = RankingDataset([RankingPair(a, e)])
    cf = closed_form_reward(a, e, 1.0)
    assert measure_eps_r(ds, cf, 1.0) == 0.0
    assert measure_eps_r(ds, cf.with_params(cf.params + 0.1), 1.0) == pytest.approx(0.1)


def test_eps_r_needs_online_pair():
    with pytest.raises(ValueError, match="online"):
        measure_eps_r(RankingDataset(), RewardFn.tabular(2, 1), 1.0)


def test_certificate_matched_expert(small_mdp, rng):
    pi = random_policy(rng, 5, 3)
    expert = exact_visitation(small_mdp, pi)
    reward = closed_form_reward(expert, expert, 1.0)
    rep = theorem1_certificate(small_mdp, pi, reward, expert, 1.0)
    assert rep.f_divergence == pytest.approx(0.0, abs=1e-12)
    assert rep.eps_r == pytest.approx(0.0, abs=1e-12)
    assert rep.bound_satisfied


def test_certificate_random_instances(rng):
    for seed in range(30):
        mdp = random_mdp(int(rng.integers(2, 12)), int(rng.integers(1, 4)), seed=seed, gamma=0.9)
        n_s, n_a = mdp.n_states, mdp.n_actions
        expert = exact_visitation(mdp, random_policy(rng, n_s, n_a))
        pi = random_policy(rng, n_s, n_a)
        reward = RewardFn("state_action", rng.uniform(-1, 2, size=(n_s + 1, n_a)))
        rep = theorem1_certificate(mdp, pi, reward, expert, 1.0)
        assert rep.bound_satisfied
        assert rep.eps_pi >= 0 and rep.eps_r >= 0


def test_certificate_state_only_expert(small_mdp, rng):
    expert = exact_visitation(small_mdp, random_policy(rng, 5, 3)).state_marginal()
    pi = random_policy(rng, 5, 3)
    reward = RewardFn.tabular(5, 1, "state_only", init=0.5)
    rep = theorem1_certificate(small_mdp, pi, reward, expert, 1.0)
    assert rep.bound_satisfied


def _report(round, ratio, steps):
    return GameReport(round, 0.1, 0.0, 0.0, 0.0, 0.0, True, ratio, steps)


def test_csv_round_trip():
    reports = [
        GameReport(1, 0.25, 1e-3, 0.5, 0.1, 0.2, True, 0.5, 10),
        GameReport(2, 1 / 3, 0.0, 0.0, 0.0, 0.0, False, float("nan"), 20),
    ]
    text = reports_to_csv(reports)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "true" in text and "false" in text
    back = reports_from_csv(text)
    assert back[0] == reports[0]
    assert back[1].ranking_loss == 1 / 3 and np.isnan(back[1].true_return_ratio)
    assert reports_to_csv(back) == text


def test_steps_to_threshold_first_crossing():
    reps = [_report(1, 0.5, 10), _report(2, 0.95, 20), _report(3, 0.8, 30), _report(4, 0.99, 40)]
    assert steps_to_threshold(reps, 0.9) == 20
    assert steps_to_threshold(reps, 0.99) == 40
    assert steps_to_threshold(reps, 0.999) is None


def test_steps_to_threshold_after_round():
    reps = [_report(1, 0.95, 10), _report(2, 0.2, 20), _report(3, 0.95, 30)]
    assert steps_to_threshold(reps, 0.9, after_round=1) == 20
