"""Finite MDPs, exact policy evaluation and occupancy measures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from ._validation import (
    PROB_ATOL,
    VISITATION_ATOL,
    as_float_array,
    check_distribution,
    check_positive_int,
    frozen,
)
from .reward import RewardFn


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP.

    ``transition[s, a, s']`` is the probability of moving to ``s'``. ``horizon``
    is the episode length used for rollouts and per-step marginals; exact
    occupancy measures use the infinite-horizon discounted solve.
    """

    transition: np.ndarray
    gamma: float
    rho0: np.ndarray
    horizon: int
    r_max: float = 1.0
    true_reward: np.ndarray | None = None

    def __post_init__(self):
        P = as_float_array(self.transition, "transition", ndim=3)
        if P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {P.shape}")
        P = check_distribution(P, "transition", axis=2)
        rho0 = check_distribution(as_float_array(self.rho0, "rho0", ndim=1), "rho0")
        if rho0.shape[0] != P.shape[0]:
            raise ValueError(f"rho0 has {rho0.shape[0]} states, transition has {P.shape[0]}")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not float(self.r_max) > 0:
            raise ValueError("r_max must be positive")
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))
        object.__setattr__(self, "horizon", check_positive_int(self.horizon, "horizon"))
        object.__setattr__(self, "transition", frozen(P))
        object.__setattr__(self, "rho0", frozen(rho0))
        if self.true_reward is not None:
            R = as_float_array(self.true_reward, "true_reward", ndim=2)
            if R.shape != P.shape[:2]:
                raise ValueError(f"true_reward must be (S, A) = {P.shape[:2]}, got {R.shape}")
            if np.any(R < -PROB_ATOL) or np.any(R > self.r_max + PROB_ATOL):
                raise ValueError("true_reward must lie in [0, r_max]")
            object.__setattr__(self, "true_reward", frozen(R))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_reward(self, true_reward) -> "TabularMdp":
        return TabularMdp(self.transition, self.gamma, self.rho0, self.horizon, self.r_max, true_reward)

    def to_dict(self) -> dict:
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "gamma": self.gamma,
            "rho0": self.rho0.tolist(),
            "horizon": self.horizon,
            "r_max": self.r_max,
        }
        if self.true_reward is not None:
            doc["true_reward"] = self.true_reward.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        missing = {"n_states", "n_actions", "transition", "gamma", "rho0", "horizon", "r_max"} - set(doc)
        if missing:
            raise ValueError(f"MDP document missing fields: {sorted(missing)}")
        mdp = cls(
            np.asarray(doc["transition"], dtype=float),
            doc["gamma"],
            np.asarray(doc["rho0"], dtype=float),
            doc["horizon"],
            doc["r_max"],
            None if doc.get("true_reward") is None else np.asarray(doc["true_reward"], dtype=float),
        )
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("n_states/n_actions disagree with the transition tensor")
        return mdp


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1))


def load_mdp(path) -> TabularMdp:
    return TabularMdp.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        probs = check_distribution(as_float_array(self.probs, "probs", ndim=2), "policy", axis=1)
        object.__setattr__(self, "probs", frozen(probs))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_logits(cls, logits) -> "Policy":
        return cls(softmax(np.asarray(logits, dtype=float), axis=1))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True, eq=False)
class Visitation:
    """Normalized occupancy table plus optional per-step marginals.

    ``rho`` is ``(S, A)`` for state-action visitations or ``(S,)`` for
    state-only ones. When ``absorbing`` is set the last row is the reserved
    absorbing state.
    """

    rho: np.ndarray
    time_marginals: np.ndarray | None = None
    absorbing: bool = False

    def __post_init__(self):
        rho = check_distribution(as_float_array(self.rho, "rho", ndim=(1, 2)), "rho", atol=VISITATION_ATOL)
        object.__setattr__(self, "rho", frozen(rho))
        if self.time_marginals is not None:
            tm = as_float_array(self.time_marginals, "time_marginals")
            if tm.shape[1:] != rho.shape:
                raise ValueError(f"time_marginals shape {tm.shape} incompatible with rho {rho.shape}")
            tm = check_distribution(
                tm, "time_marginals", axis=tuple(range(1, tm.ndim)), atol=VISITATION_ATOL
            )
            object.__setattr__(self, "time_marginals", frozen(tm))

    @property
    def state_only(self) -> bool:
        return self.rho.ndim == 1

    def state_marginal(self) -> "Visitation":
        """Drop the action axis (the LfO view of the same visitation)."""
        if self.state_only:
            return self
        tm = None if self.time_marginals is None else self.time_marginals.sum(axis=-1)
        return Visitation(self.rho.sum(axis=1), tm, self.absorbing)

    def with_rows(self, n_rows: int) -> np.ndarray:
        """``rho`` zero-padded to ``n_rows`` rows."""
        extra = n_rows - self.rho.shape[0]
        if extra < 0:
            raise ValueError("cannot shrink a visitation table")
        if extra == 0:
            return np.asarray(self.rho)
        return np.concatenate([self.rho, np.zeros((extra,) + self.rho.shape[1:])])

    def to_dict(self) -> dict:
        return {
            "rho": self.rho.tolist(),
            "time_marginals": None if self.time_marginals is None else self.time_marginals.tolist(),
            "absorbing": self.absorbing,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Visitation":
        tm = doc.get("time_marginals")
        return cls(np.asarray(doc["rho"], dtype=float), None if tm is None else np.asarray(tm, dtype=float),
                   bool(doc.get("absorbing", False)))


def align_pair(p: Visitation, q: Visitation) -> tuple[np.ndarray, np.ndarray]:
    """Return both tables on a common layout (absorbing padding, state marginals)."""
    if p.state_only != q.state_only:
        p, q = p.state_marginal(), q.state_marginal()
    rows = max(p.rho.shape[0], q.rho.shape[0])
    a, b = p.with_rows(rows), q.with_rows(rows)
    if a.shape != b.shape:
        raise ValueError(f"visitations are not dimension-compatible: {a.shape} vs {b.shape}")
    return a, b


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    terminated_early: bool = False

    def __post_init__(self):
        s = np.asarray(self.states, dtype=int).ravel()
        a = np.asarray(self.actions, dtype=int).ravel()
        if s.size < 1 or s.size != a.size:
            raise ValueError("trajectory needs >= 1 step and matching states/actions")
        if s.min() < 0 or a.min() < 0:
            raise ValueError("negative state or action index")
        s.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    def __len__(self) -> int:
        return self.states.size

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.states.tolist(), self.actions.tolist()))

    def to_dict(self) -> dict:
        return {"states": self.states.tolist(), "actions": self.actions.tolist(),
                "terminated_early": self.terminated_early}

    @classmethod
    def from_dict(cls, doc: dict) -> "Trajectory":
        return cls(doc["states"], doc["actions"], bool(doc.get("terminated_early", False)))


def _check_compatible(mdp: TabularMdp, pi: Policy) -> None:
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")


def state_transition(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """``P_pi[s, s'] = sum_a pi(a|s) P(s, a, s')``."""
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def time_marginals(mdp: TabularMdp, pi: Policy, horizon: int | None = None) -> np.ndarray:
    """Undiscounted per-step distributions ``Pr(s_t = s, a_t = a)`` for t < H."""
    horizon = mdp.horizon if horizon is None else horizon
    P_pi = state_transition(mdp, pi)
    out = np.empty((horizon, mdp.n_states, mdp.n_actions))
    mu = np.asarray(mdp.rho0)
    for t in range(horizon):
        out[t] = mu[:, None] * pi.probs
        mu = mu @ P_pi
    return out


def exact_visitation(mdp: TabularMdp, pi: Policy, with_time_marginals: bool = True) -> Visitation:
    """Normalized discounted occupancy ``(1 - gamma) sum_t gamma^t Pr(s_t, a_t)``."""
    _check_compatible(mdp, pi)
    P_pi = state_transition(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    d = np.linalg.solve(A, (1.0 - mdp.gamma) * np.asarray(mdp.rho0))
    d = np.clip(d, 0.0, None)
    assert abs(d.sum() - 1.0) < 1e-8, "flow system solve lost normalization"
    rho = d[:, None] * pi.probs
    rho = rho / rho.sum()
    tm = time_marginals(mdp, pi) if with_time_marginals else None
    return Visitation(rho, tm)


def pad_absorbing(trajectory: Trajectory, mdp: TabularMdp) -> Trajectory:
    """Extend an early-terminated trajectory to the horizon with absorbing steps.

    The absorbing state has index ``mdp.n_states`` and always takes action 0.
    """
    if not trajectory.terminated_early or len(trajectory) >= mdp.horizon:
        return trajectory
    extra = mdp.horizon - len(trajectory)
    states = np.concatenate([trajectory.states, np.full(extra, mdp.n_states)])
    actions = np.concatenate([trajectory.actions, np.zeros(extra, dtype=int)])
    return Trajectory(states, actions, terminated_early=True)


def empirical_visitation(trajectories, mdp: TabularMdp, discount: float | None = None) -> Visitation:
    """Discount-weighted, normalized state-action counts over trajectories.

    ``discount`` defaults to ``mdp.gamma``; pass 1.0 for plain frequencies.
    An absorbing row is added when any trajectory terminated early.
    Per-step marginals are normalized over the trajectories alive at step t.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empirical_visitation needs at least one trajectory")
    discount = mdp.gamma if discount is None else float(discount)
    padded = [pad_absorbing(tr, mdp) for tr in trajectories]
    absorbing = any(tr.terminated_early for tr in padded)
    rows = mdp.n_states + (1 if absorbing else 0)
    H = max(len(tr) for tr in padded)
    counts = np.zeros((H, rows, mdp.n_actions))
    for tr in padded:
        if tr.states.max() >= rows or tr.actions.max() >= mdp.n_actions:
            raise ValueError("trajectory indices out of range for the MDP")
        np.add.at(counts, (np.arange(len(tr)), tr.states, tr.actions), 1.0)
    per_step = counts.sum(axis=(1, 2))
    weights = discount ** np.arange(H)
    rho = np.tensordot(weights, counts, axes=1)
    rho /= rho.sum()
    tm = counts / per_step[:, None, None]
    return Visitation(rho, tm, absorbing)


def reward_table(reward, mdp: TabularMdp) -> np.ndarray:
    """Accept a RewardFn or a raw ``(S, A)``/``(S,)`` array, return ``(S, A)``."""
    if isinstance(reward, RewardFn):
        return reward.mdp_table(mdp.n_actions)
    R = np.asarray(reward, dtype=float)
    if R.ndim == 1:
        R = np.repeat(R[:, None], mdp.n_actions, axis=1)
    if R.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"reward shape {R.shape} does not match MDP")
    return R


def policy_return(mdp: TabularMdp, pi: Policy, reward) -> float:
    """``J(pi; R) = sum rho(s, a) R(s, a) / (1 - gamma)``."""
    rho = exact_visitation(mdp, pi, with_time_marginals=False).rho
    return float(np.sum(rho * reward_table(reward, mdp)) / (1.0 - mdp.gamma))


def policy_values(mdp: TabularMdp, pi: Policy, reward) -> np.ndarray:
    R = reward_table(reward, mdp)
    P_pi = state_transition(mdp, pi)
    r_pi = np.sum(pi.probs * R, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def soft_bellman_backup(mdp: TabularMdp, R: np.ndarray, Q: np.ndarray, temperature: float) -> np.ndarray:
    V = temperature * logsumexp(Q / temperature, axis=1)
    return R + mdp.gamma * mdp.transition @ V


def soft_value_iteration(mdp: TabularMdp, reward, temperature: float, n_iters: int) -> Policy:
    """Softmax policy of entropy-regularized Q after ``n_iters`` backups from zero."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    n_iters = check_positive_int(n_iters, "n_iters")
    R = reward_table(reward, mdp)
    Q = np.zeros_like(R)
    for _ in range(n_iters):
        Q = soft_bellman_backup(mdp, R, Q, temperature)
    return Policy.from_logits(Q / temperature)


def hard_value_iteration(mdp: TabularMdp, reward, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[Policy, float]:
    """Optimal deterministic policy and its return ``J*``.

    Value iteration to a ``tol`` residual, then policy iteration from the
    greedy policy so the reported policy is exactly optimal.
    """
    R = reward_table(reward, mdp)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = np.max(R + mdp.gamma * mdp.transition @ V, axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    actions = np.argmax(R + mdp.gamma * mdp.transition @ V, axis=1)
    for _ in range(max_iter):
        pi = Policy.deterministic(actions, mdp.n_actions)
        V = policy_values(mdp, pi, R)
        Q = R + mdp.gamma * mdp.transition @ V
        best = np.argmax(Q, axis=1)
        current = Q[np.arange(mdp.n_states), actions]
        improve = Q[np.arange(mdp.n_states), best] > current + 1e-12 * (1.0 + np.abs(current))
        if not improve.any():
            break
        actions = np.where(improve, best, actions)
    pi = Policy.deterministic(actions, mdp.n_actions)
    return pi, float(np.asarray(mdp.rho0) @ policy_values(mdp, pi, R))


def sample_trajectories(mdp: TabularMdp, pi: Policy, n: int, seed=None) -> list[Trajectory]:
    """``n`` independent H-step rollouts; reproducible for a fixed seed."""
    _check_compatible(mdp, pi)
    n = check_positive_int(n, "n")
    rng = np.random.default_rng(seed)
    H = mdp.horizon
    states = np.empty((n, H), dtype=int)
    actions = np.empty((n, H), dtype=int)
    pi_cdf = np.cumsum(pi.probs, axis=1)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    s = _draw(np.cumsum(mdp.rho0)[None, :].repeat(n, axis=0), rng)
    for t in range(H):
        a = _draw(pi_cdf[s], rng)
        states[:, t], actions[:, t] = s, a
        s = _draw(P_cdf[s, a], rng)
    return [Trajectory(states[i], actions[i]) for i in range(n)]


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)
