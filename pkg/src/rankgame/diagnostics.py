"""Divergences, measured equilibrium errors and the imitation-gap certificate.

The certificate checks, from measured quantities only,

    D_f(rho_agent || rho_expert) <= ((1 - gamma) * eps_pi + 2 * eps_r) / k

with D_f(p || q) = sum_x q(x) (q(x) - p(x)) / (q(x) + p(x)), the f-divergence
generated by f(x) = (1 - x) / (1 + x). Writing q = (q + p)/2 + (q - p)/2 shows
D_f = 1/2 * sum (q - p)^2 / (q + p), so it is nonnegative and at most 1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .mdp import Policy, TabularMdp, Visitation, align_pair, exact_visitation, hard_value_iteration, policy_return
from .ranking import ONLINE, RankingDataset, RankingPair, closed_form_reward, expect, loss_lk
from .reward import RewardFn

CSV_COLUMNS = (
    "round",
    "ranking_loss",
    "eps_r",
    "eps_pi",
    "f_divergence",
    "bound_rhs",
    "bound_satisfied",
    "true_return_ratio",
    "env_steps",
)
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class GameReport:
    round: int
    ranking_loss: float
    eps_r: float
    eps_pi: float
    f_divergence: float
    bound_rhs: float
    bound_satisfied: bool
    true_return_ratio: float = float("nan")
    env_steps: int = 0

    def as_row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            val = getattr(self, name)
            if isinstance(val, bool):
                out.append("true" if val else "false")
            elif isinstance(val, float):
                out.append(repr(val))
            else:
                out.append(str(val))
        return out


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.as_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[GameReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append(GameReport(
            round=int(row["round"]),
            ranking_loss=float(row["ranking_loss"]),
            eps_r=float(row["eps_r"]),
            eps_pi=float(row["eps_pi"]),
            f_divergence=float(row["f_divergence"]),
            bound_rhs=float(row["bound_rhs"]),
            bound_satisfied=row["bound_satisfied"] == "true",
            true_return_ratio=float(row["true_return_ratio"]),
            env_steps=int(row["env_steps"]),
        ))
    return out


def f_divergence(rho_p: Visitation, rho_q: Visitation) -> float:
    """D_f(rho_p || rho_q) with generator (1 - x)/(1 + x); rho_q plays the expert."""
    p, q = align_pair(rho_p, rho_q)
    for name, arr in (("rho_p", p), ("rho_q", q)):
        if abs(arr.sum() - 1.0) > 1e-8:
            raise ValueError(f"{name} is not normalized")
    denom = p + q
    mask = denom > 0
    terms = q[mask] * (q[mask] - p[mask]) / denom[mask]
    return math.fsum(terms.ravel())


def measure_eps_pi(mdp: TabularMdp, pi: Policy, reward) -> float:
    """Suboptimality J*(R) - J(pi; R) under the learned reward."""
    _, j_star = hard_value_iteration(mdp, reward)
    return j_star - policy_return(mdp, pi, reward)


def _online_pair(dataset: RankingDataset) -> RankingPair:
    for p in dataset.pairs:
        if p.source == ONLINE:
            return p
    raise ValueError("dataset lacks an online (agent < expert) pair")


def measure_eps_r(dataset: RankingDataset, reward: RewardFn, k: float) -> float:
    """Largest deviation of ``reward`` from the L_k minimizer on the pair's support."""
    pair = _online_pair(dataset)
    a, e = align_pair(pair.lesser, pair.greater)
    target = closed_form_reward(pair.lesser, pair.greater, k).aligned(a.shape)
    fitted = reward.aligned(a.shape)
    support = (a + e) > 0
    if not support.any():
        return 0.0
    return float(np.max(np.abs(fitted - target)[support]))


def bound_rhs(gamma: float, eps_pi: float, eps_r: float, k: float) -> float:
    return ((1.0 - gamma) * eps_pi + 2.0 * eps_r) / k


def theorem1_certificate(mdp: TabularMdp, pi: Policy, reward: RewardFn, expert: Visitation, k: float,
                         round: int = 0, true_return_ratio: float = float("nan"),
                         env_steps: int = 0) -> GameReport:
    """Assemble D_f, eps_pi, eps_r and the bound from measured quantities.

    The agent side uses the exact occupancy of ``pi``. eps_pi covers every
    comparison policy including the expert demonstration itself, which
    matters when ``expert`` is an empirical (possibly lucky) visitation.
    """
    agent = exact_visitation(mdp, pi, with_time_marginals=False)
    if expert.state_only:
        agent = agent.state_marginal()
    dataset = RankingDataset([RankingPair(agent, expert)])
    eps_pi = measure_eps_pi(mdp, pi, reward)
    expert_gap = (expect(expert, reward) - expect(agent, reward)) / (1.0 - mdp.gamma)
    eps_pi = max(eps_pi, expert_gap, 0.0)
    eps_r = measure_eps_r(dataset, reward, k)
    div = f_divergence(agent, expert)
    rhs = bound_rhs(mdp.gamma, eps_pi, eps_r, k)
    return GameReport(
        round=round,
        ranking_loss=loss_lk(dataset, reward, k),
        eps_r=eps_r,
        eps_pi=eps_pi,
        f_divergence=div,
        bound_rhs=rhs,
        bound_satisfied=bool(div <= rhs + BOUND_SLACK),
        true_return_ratio=true_return_ratio,
        env_steps=env_steps,
    )


def report_dict(report: GameReport) -> dict:
    return asdict(report)


def report_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(GameReport))


def steps_to_threshold(reports, threshold: float = 0.9, after_round: int = 0):
    """env_steps at the first round (after ``after_round``) whose return ratio reaches ``threshold``.

    Counted from the env_steps at ``after_round``; None if never reached.
    """
    base = 0
    for r in reports:
        if r.round == after_round:
            base = r.env_steps
    for r in reports:
        if r.round > after_round and r.true_return_ratio >= threshold:
            return r.env_steps - base
    return None
