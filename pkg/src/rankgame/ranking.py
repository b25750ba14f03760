"""Ranking datasets and the reward learner's regression losses.

Every ranking loss here is a weighted least-squares regression of reward
values onto return targets under visitation tables: the pairwise L_k loss
(lesser member to 0, greater member to k), the shaped chain loss SL_k
(member i to target k_i), the offline combination of the two, and snippet
augmentation on raw trajectories. The supremum loss is the linear
E_expert[R] - E_agent[R] objective maximized over a clamped reward class.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import TabularMdp, Trajectory, Visitation, align_pair, empirical_visitation, pad_absorbing
from .reward import DEFAULT_CLAMP, RewardFn

logger = logging.getLogger(__name__)

ONLINE = "online_agent_vs_expert"
AUTO = "auto_interpolant"
OFFLINE = "offline_annotated"
SOURCES = (ONLINE, AUTO, OFFLINE)

LOSS_KINDS = ("lk", "slk", "supremum", "offline")


@dataclass(frozen=True, eq=False)
class RankingPair:
    lesser: Visitation
    greater: Visitation
    source: str = ONLINE

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown ranking source {self.source!r}")
        align_pair(self.lesser, self.greater)


@dataclass(frozen=True, eq=False)
class RankingChain:
    """Visitations ordered weakest to strongest with nondecreasing targets."""

    members: tuple
    targets: np.ndarray

    def __post_init__(self):
        members = tuple(self.members)
        targets = np.asarray(self.targets, dtype=float).ravel()
        if not members or len(members) != targets.size:
            raise ValueError("chain needs one target per member and at least one member")
        if np.any(np.diff(targets) < 0):
            raise ValueError("chain targets must be nondecreasing")
        for m in members[1:]:
            align_pair(members[0], m)
        targets.setflags(write=False)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ShapingFamily:
    """Maps interpolation level alpha in [0, 1] to a return target.

    ``linear``: k = alpha * k_max. ``exponential`` (exp-beta): dk/dalpha is
    proportional to exp(beta * alpha), pinned to 0 at alpha=0 and k_max at 1.
    """

    kind: str = "exponential"
    beta: float = -1.0
    k_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ValueError(f"unknown shaping family {self.kind!r}")


@dataclass(frozen=True, eq=False)
class RankingDataset:
    pairs: tuple = ()
    chains: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "chains", tuple(self.chains))

    def __len__(self) -> int:
        return len(self.pairs)

    def add(self, pair: RankingPair) -> "RankingDataset":
        return RankingDataset(self.pairs + (pair,), self.chains)

    def to_dict(self) -> dict:
        blobs: dict[str, dict] = {}
        ids: dict[int, str] = {}

        def ref(v: Visitation) -> str:
            if id(v) not in ids:
                ids[id(v)] = f"v{len(ids)}"
                blobs[ids[id(v)]] = v.to_dict()
            return ids[id(v)]

        pairs = [{"lesser": ref(p.lesser), "greater": ref(p.greater), "source": p.source} for p in self.pairs]
        chains = [{"members": [ref(m) for m in c.members], "targets": c.targets.tolist()} for c in self.chains]
        return {"visitations": blobs, "pairs": pairs, "chains": chains}

    @classmethod
    def from_dict(cls, doc: dict) -> "RankingDataset":
        blobs = {key: Visitation.from_dict(v) for key, v in doc.get("visitations", {}).items()}
        try:
            pairs = [RankingPair(blobs[p["lesser"]], blobs[p["greater"]], p.get("source", ONLINE))
                     for p in doc.get("pairs", [])]
            chains = [RankingChain([blobs[m] for m in c["members"]], c["targets"]) for c in doc.get("chains", [])]
        except KeyError as exc:
            raise ValueError(f"dataset references unknown visitation {exc}") from None
        return cls(pairs, chains)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RankingDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- expectations -------------------------------------------------------------

def expect(vis: Visitation, reward: RewardFn) -> float:
    """E_{(s,a) ~ vis}[R(s, a)]."""
    return math.fsum((vis.rho * reward.aligned(vis.rho.shape)).ravel())


def _expect_sq(vis: Visitation, reward: RewardFn, target: float) -> float:
    err = reward.aligned(vis.rho.shape) - target
    return math.fsum((vis.rho * err * err).ravel())


# -- L_k and its closed-form minimizer ------------------------------------------

def loss_lk(dataset: RankingDataset, reward: RewardFn, k: float) -> float:
    """Mean over pairs of E_lesser[R^2] + E_greater[(R - k)^2]."""
    if not dataset.pairs:
        raise ValueError("loss_lk needs at least one ranking pair")
    terms = [_expect_sq(p.lesser, reward, 0.0) + _expect_sq(p.greater, reward, k) for p in dataset.pairs]
    return math.fsum(terms) / len(terms)


def closed_form_reward(rho_agent: Visitation, rho_expert: Visitation, k: float,
                       clamp_range: tuple[float, float] | None = None) -> RewardFn:
    """Pointwise minimizer of L_k for a single (agent < expert) pair.

    ``R = k * rho_E / (rho_E + rho_agent)``; entries where both masses vanish
    get k/2. The absorbing row, if present, stays pinned at zero.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    a, e = align_pair(rho_agent, rho_expert)
    denom = a + e
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(denom > 0, k * e / np.where(denom > 0, denom, 1.0), 0.5 * k)
    if clamp_range is None:
        clamp_range = (min(DEFAULT_CLAMP[0], 0.0), max(DEFAULT_CLAMP[1], float(k)))
    absorbing = rho_agent.absorbing or rho_expert.absorbing
    if not absorbing:
        table = np.concatenate([table, np.zeros((1,) + table.shape[1:])])
    return RewardFn("state_only" if table.ndim == 1 else "state_action", table, clamp_range)


# -- shaping, interpolants and SL_k --------------------------------------------

def shape_targets(family: ShapingFamily, alphas) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise ValueError("alphas must lie in [0, 1]")
    if family.kind == "linear" or family.beta == 0.0:
        return family.k_max * alphas
    b = float(family.beta)
    return family.k_max * np.expm1(b * alphas) / np.expm1(b)


def interpolation_levels(p: int) -> np.ndarray:
    """alpha_i = i / (p + 1) for i = 1..p."""
    return np.arange(1, p + 1) / (p + 1)


def _discounted_aggregate(tm: np.ndarray, gamma: float) -> np.ndarray:
    w = gamma ** np.arange(tm.shape[0])
    rho = np.tensordot(w / w.sum(), tm, axes=1)
    return rho / rho.sum()


def make_interpolants(rho_agent: Visitation, rho_expert: Visitation, p: int = 5,
                      gamma: float = 0.99) -> list[Visitation]:
    """Per-step convex combinations from the agent toward the expert."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if rho_agent.time_marginals is None or rho_expert.time_marginals is None:
        raise ValueError("interpolation needs per-step marginals on both visitations")
    if rho_agent.state_only != rho_expert.state_only:
        rho_agent, rho_expert = rho_agent.state_marginal(), rho_expert.state_marginal()
    ta, te = rho_agent.time_marginals, rho_expert.time_marginals
    if ta.shape[0] != te.shape[0]:
        raise ValueError(f"time marginal lengths differ: {ta.shape[0]} vs {te.shape[0]}")
    rows = max(ta.shape[1], te.shape[1])
    ta, te = _pad_rows(ta, rows), _pad_rows(te, rows)
    absorbing = rho_agent.absorbing or rho_expert.absorbing
    out = []
    for alpha in interpolation_levels(p):
        tm = ta + alpha * (te - ta)
        out.append(Visitation(_discounted_aggregate(tm, gamma), tm, absorbing))
    return out


def _pad_rows(tm: np.ndarray, rows: int) -> np.ndarray:
    if tm.shape[1] == rows:
        return tm
    pad = np.zeros((tm.shape[0], rows - tm.shape[1]) + tm.shape[2:])
    return np.concatenate([tm, pad], axis=1)


def auto_chain(rho_agent: Visitation, rho_expert: Visitation, p: int, family: ShapingFamily,
               gamma: float) -> RankingChain:
    """Agent, p interpolants, expert, with targets shaped at alpha = i/(p+1)."""
    inner = make_interpolants(rho_agent, rho_expert, p, gamma)
    if rho_agent.state_only != rho_expert.state_only:
        rho_agent, rho_expert = rho_agent.state_marginal(), rho_expert.state_marginal()
    alphas = np.arange(p + 2) / (p + 1)
    return RankingChain([rho_agent, *inner, rho_expert], shape_targets(family, alphas))


def loss_slk(chain: RankingChain, reward: RewardFn) -> float:
    """Mean over chain members of E_member[(R - k_i)^2]."""
    terms = [_expect_sq(m, reward, t) for m, t in zip(chain.members, chain.targets)]
    return math.fsum(terms) / len(terms)


def ground_chain(chain: RankingChain, expert: Visitation, k: float) -> RankingChain:
    """Append the expert visitation at target k on top of an offline chain."""
    if k < chain.targets[-1]:
        raise ValueError("grounding target must be at least the chain's top target")
    return RankingChain([*chain.members, expert], [*chain.targets, k])


def loss_offline_combined(online: RankingDataset, offline_chain: RankingChain, reward: RewardFn,
                          k: float, lam: float = 0.3) -> float:
    """lam * L_k(online) + (1 - lam) * SL_k(offline chain)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    total = 0.0
    if lam > 0:
        total += lam * loss_lk(online, reward, k)
    if lam < 1:
        total += (1.0 - lam) * loss_slk(offline_chain, reward)
    return total


# -- supremum loss -------------------------------------------------------------

def loss_supremum(rho_agent: Visitation, rho_expert: Visitation, reward: RewardFn) -> float:
    """E_expert[R] - E_agent[R]; the reward player ascends this."""
    return expect(rho_expert, reward) - expect(rho_agent, reward)


def loss_supremum_grad(rho_agent: Visitation, rho_expert: Visitation, reward: RewardFn) -> np.ndarray:
    """Gradient of E_expert[R] - E_agent[R] with respect to reward params."""
    a, e = align_pair(rho_agent, rho_expert)
    return reward.backprop(reward.to_value_space(e - a))


# -- snippets ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Snippets:
    """Offline trajectories with their annotated return levels k_i."""

    trajectories: tuple
    targets: np.ndarray
    length: int = 10

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        targets = np.asarray(self.targets, dtype=float).ravel()
        if len(trajs) != targets.size:
            raise ValueError("one target per trajectory required")
        if self.length < 1:
            raise ValueError("snippet length must be >= 1")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "targets", targets)

    def windows(self):
        """Yield (states, actions, target) per trajectory, one row per window."""
        l = self.length
        for tr, k_i in zip(self.trajectories, self.targets):
            if len(tr) < l:
                continue
            s = np.lib.stride_tricks.sliding_window_view(tr.states, l)
            a = np.lib.stride_tricks.sliding_window_view(tr.actions, l)
            yield s, a, float(k_i)


def _snippet_values(reward: RewardFn, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    vals = reward.values()
    return vals[s] if reward.state_only else vals[s, a]


def augment_snippets(trajectories: Sequence[Trajectory], targets, l: int, reward: RewardFn) -> np.ndarray:
    """Squared errors (sum of R over window - k_i * l)^2, one per stride-1 window."""
    snip = Snippets(trajectories, targets, l)
    out = [((_snippet_values(reward, s, a).sum(axis=1) - k_i * l) ** 2) for s, a, k_i in snip.windows()]
    return np.concatenate(out) if out else np.zeros(0)


# -- offline preference files -----------------------------------------------------

def load_offline_preferences(path) -> tuple[list[Trajectory], np.ndarray]:
    """Read ``{"trajectories": [{states, actions, terminated_early}], "targets": [...]}``."""
    doc = json.loads(Path(path).read_text())
    trajs = [Trajectory.from_dict(t) for t in doc["trajectories"]]
    targets = np.asarray(doc["targets"], dtype=float)
    if targets.size != len(trajs):
        raise ValueError("offline preference file needs one target per trajectory")
    return trajs, targets


def save_offline_preferences(path, trajectories, targets) -> None:
    doc = {"trajectories": [t.to_dict() for t in trajectories], "targets": np.asarray(targets).tolist()}
    Path(path).write_text(json.dumps(doc))


def chain_from_trajectories(trajectories, targets, mdp: TabularMdp) -> RankingChain:
    """Group trajectories by target level into an ordered chain of empirical visitations."""
    targets = np.asarray(targets, dtype=float)
    levels = np.unique(targets)
    padded = [pad_absorbing(t, mdp) for t in trajectories]
    absorbing = any(t.terminated_early for t in padded)
    members = []
    for level in levels:
        group = [t for t, k in zip(padded, targets) if k == level]
        vis = empirical_visitation(group, mdp)
        if absorbing and not vis.absorbing:
            tm = _pad_rows(vis.time_marginals, mdp.n_states + 1)
            vis = Visitation(vis.with_rows(mdp.n_states + 1), tm, True)
        members.append(vis)
    return RankingChain(members, levels)


# -- fitting -------------------------------------------------------------------

@dataclass
class FitConfig:
    """Reward-fit settings. Defaults follow the common hyperparameter table."""

    lr: float = 1e-3
    l2: float = 1e-4
    clamp_range: tuple[float, float] = DEFAULT_CLAMP
    max_steps: int = 1000
    tol: float = 1e-6
    solver: str = "adam"
    k: float = 1.0
    lam: float = 0.3
    snippet_weight: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.solver not in ("adam", "sgd", "exact"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class FitResult:
    reward: RewardFn
    n_steps: int
    grad_norm: float
    converged: bool
    losses: list = field(default_factory=list)


@dataclass
class _Quadratic:
    """sum_j coef_j * sum_x w_j(x) (R(x) - t_j)^2 in value space, plus a linear part."""

    terms: list
    linear: np.ndarray | None = None

    def value(self, vals: np.ndarray) -> float:
        parts = [c * np.sum(w * (vals - t) ** 2) for w, t, c in self.terms]
        if self.linear is not None:
            parts.append(-np.sum(self.linear * vals))
        return math.fsum(parts)

    def grad(self, vals: np.ndarray) -> np.ndarray:
        g = np.zeros_like(vals)
        for w, t, c in self.terms:
            g += 2.0 * c * w * (vals - t)
        if self.linear is not None:
            g -= self.linear
        return g


def _objective(dataset: RankingDataset, reward: RewardFn, loss_kind: str, cfg: FitConfig) -> _Quadratic:
    vs = reward.to_value_space
    terms = []

    def add_pairs(coef):
        n = len(dataset.pairs)
        if n == 0:
            raise ValueError(f"loss {loss_kind!r} needs ranking pairs")
        for p in dataset.pairs:
            terms.append((vs(p.lesser.rho), 0.0, coef / n))
            terms.append((vs(p.greater.rho), cfg.k, coef / n))

    def add_chains(coef):
        if not dataset.chains:
            raise ValueError(f"loss {loss_kind!r} needs ranking chains")
        for c in dataset.chains:
            per = coef / (len(dataset.chains) * len(c))
            for m, t in zip(c.members, c.targets):
                terms.append((vs(m.rho), float(t), per))

    if loss_kind == "lk":
        add_pairs(1.0)
    elif loss_kind == "slk":
        add_chains(1.0)
    elif loss_kind == "offline":
        if cfg.lam > 0:
            add_pairs(cfg.lam)
        if cfg.lam < 1:
            add_chains(1.0 - cfg.lam)
    elif loss_kind == "supremum":
        if not dataset.pairs:
            raise ValueError("supremum loss needs ranking pairs")
        lin = sum(vs(align_pair(p.lesser, p.greater)[1] - align_pair(p.lesser, p.greater)[0])
                  for p in dataset.pairs)
        return _Quadratic([], lin / len(dataset.pairs))
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    return _Quadratic(terms)


def _snippet_loss_grad(snippets: Snippets, reward: RewardFn, weight: float):
    """Mean of (window sum - k_i l)^2 / l^2 and its gradient in value space."""
    vals = reward.values()
    g = np.zeros_like(vals)
    total, count = [], 0
    l = snippets.length
    for s, a, k_i in snippets.windows():
        resid = _snippet_values(reward, s, a).sum(axis=1) - k_i * l
        total.append(np.sum(resid ** 2))
        count += resid.size
        coef = np.repeat(2.0 * resid[:, None], l, axis=1)
        if reward.state_only:
            np.add.at(g, s.ravel(), coef.ravel())
        else:
            np.add.at(g, (s.ravel(), a.ravel()), coef.ravel())
    if count == 0:
        return 0.0, g
    scale = weight / (count * l * l)
    return scale * math.fsum(total), scale * g


def _exact_fit(obj: _Quadratic, init: RewardFn, cfg: FitConfig) -> RewardFn:
    lo, hi = cfg.clamp_range
    base = np.array(init.values(), dtype=float)
    if obj.linear is not None:
        g = obj.linear
        if cfg.l2 > 0:
            sol = g / (2.0 * cfg.l2)
        else:
            sol = np.where(g > 0, hi, np.where(g < 0, lo, base))
        return init.with_params(np.clip(sol, lo, hi))
    a = np.zeros_like(base)
    b = np.zeros_like(base)
    for w, t, c in obj.terms:
        a += c * w
        b += c * w * t
    a += cfg.l2
    sol = np.where(a > 0, b / np.where(a > 0, a, 1.0), base)
    return init.with_params(np.clip(sol, lo, hi))


def fit_reward(dataset: RankingDataset, init: RewardFn, loss_kind: str = "lk",
               config: FitConfig | None = None, snippets: Snippets | None = None) -> FitResult:
    """Fit reward params by (projected) gradient descent on a ranking loss.

    Params are clamped after every step for tabular rewards; linear rewards
    are clipped at evaluation. The ``exact`` solver minimizes the separable
    quadratic directly and is only available for tabular rewards.
    """
    cfg = config or FitConfig()
    reward = RewardFn(init.kind, init.params, cfg.clamp_range, init.features)
    obj = _objective(dataset, reward, loss_kind, cfg)
    use_snippets = snippets is not None and loss_kind == "offline" and cfg.snippet_weight > 0

    if cfg.solver == "exact":
        if reward.is_linear or use_snippets:
            raise ValueError("exact solver supports tabular rewards without snippets only")
        return FitResult(_exact_fit(obj, reward, cfg), 1, 0.0, True)
    if cfg.max_steps == 0:
        return FitResult(init, 0, float("nan"), False)

    params = np.array(reward.params, dtype=float)
    lo, hi = cfg.clamp_range
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2 = cfg.adam_betas
    gnorm = float("inf")
    converged = False
    step = 0
    for step in range(1, cfg.max_steps + 1):
        vals = reward.values()
        g_vals = obj.grad(vals)
        if use_snippets:
            g_vals = g_vals + _snippet_loss_grad(snippets, reward, cfg.snippet_weight)[1]
        g = reward.backprop(g_vals) + 2.0 * cfg.l2 * params
        if not reward.is_linear:
            # projected gradient: ignore components pushing past an active bound
            g = np.where(((params <= lo) & (g > 0)) | ((params >= hi) & (g < 0)), 0.0, g)
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.tol:
            converged = True
            break
        if cfg.solver == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-12)
        else:
            params = params - cfg.lr * g
        params = reward.project(params)
        reward = reward.with_params(params)
    if not converged:
        logger.debug("reward fit stopped after %d steps, grad norm %.3g", step, gnorm)
    return FitResult(reward, step, gnorm, converged)


def fit_reward_gd(dataset: RankingDataset, init: RewardFn, loss_kind: str = "lk",
                  config: FitConfig | None = None, snippets: Snippets | None = None) -> RewardFn:
    """Gradient-fitted reward; see :func:`fit_reward` for the diagnostics."""
    return fit_reward(dataset, init, loss_kind, config, snippets).reward


def ranking_objective(dataset: RankingDataset, reward: RewardFn, loss_kind: str, config: FitConfig | None = None,
                      snippets: Snippets | None = None) -> float:
    """Value of the loss ``fit_reward`` minimizes (L2 term included)."""
    cfg = config or FitConfig()
    obj = _objective(dataset, reward, loss_kind, cfg)
    total = obj.value(reward.values()) + cfg.l2 * float(np.sum(np.asarray(reward.params) ** 2))
    if snippets is not None and loss_kind == "offline" and cfg.snippet_weight > 0:
        total += _snippet_loss_grad(snippets, reward, cfg.snippet_weight)[0]
    return total
