"""scikit-learn style front ends for the reward learner and the full game."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mdp import Policy, TabularMdp, Visitation
from .ranking import FitConfig, RankingDataset, ShapingFamily, Snippets, fit_reward, ranking_objective
from .reward import DEFAULT_CLAMP, STATE_ACTION, STATE_ONLY, RewardFn
from .stackelberg import GameConfig, run_game


def _first_visitation(dataset: RankingDataset) -> Visitation:
    if dataset.pairs:
        return dataset.pairs[0].greater
    if dataset.chains:
        return dataset.chains[0].members[-1]
    raise ValueError("ranking dataset is empty")


def _check_dataset(X) -> RankingDataset:
    if not isinstance(X, RankingDataset):
        raise TypeError(f"expected a RankingDataset, got {type(X).__name__}")
    _first_visitation(X)
    return X


class RankingRewardRegressor(BaseEstimator):
    """Learn a bounded reward that explains a ranking dataset.

    ``loss`` is one of ``lk``, ``slk``, ``supremum`` or ``offline``. With
    ``features`` the reward is linear in them, otherwise tabular. Fitted
    attributes: ``reward_``, ``n_iter_``, ``grad_norm_``, ``converged_``.
    """

    def __init__(self, loss="lk", k=1.0, lam=0.3, learning_rate=1e-3, l2=1e-4, clamp_range=DEFAULT_CLAMP,
                 max_iter=1000, tol=1e-6, solver="adam", features=None):
        self.loss = loss
        self.k = k
        self.lam = lam
        self.learning_rate = learning_rate
        self.l2 = l2
        self.clamp_range = clamp_range
        self.max_iter = max_iter
        self.tol = tol
        self.solver = solver
        self.features = features

    def _config(self) -> FitConfig:
        return FitConfig(lr=self.learning_rate, l2=self.l2, clamp_range=tuple(self.clamp_range),
                         max_steps=self.max_iter, tol=self.tol, solver=self.solver, k=self.k, lam=self.lam)

    def fit(self, X, y=None, init: RewardFn | None = None, snippets: Snippets | None = None):
        dataset = _check_dataset(X)
        ref = _first_visitation(dataset)
        kind = STATE_ONLY if ref.state_only else STATE_ACTION
        if init is None:
            if self.features is not None:
                init = RewardFn.linear(self.features, clamp_range=tuple(self.clamp_range))
            else:
                n_states = ref.rho.shape[0] - (1 if ref.absorbing else 0)
                n_actions = 1 if ref.state_only else ref.rho.shape[1]
                init = RewardFn.tabular(n_states, n_actions, kind, clamp_range=tuple(self.clamp_range))
        result = fit_reward(dataset, init, self.loss, self._config(), snippets)
        self.reward_ = result.reward
        self.n_iter_ = result.n_steps
        self.grad_norm_ = result.grad_norm
        self.converged_ = result.converged
        return self

    def predict(self, X):
        """Reward at rows of ``(state, action)`` indices, or at state indices."""
        check_is_fitted(self, "reward_")
        X = np.asarray(X, dtype=int)
        vals = self.reward_.values()
        if self.reward_.state_only:
            return vals[X if X.ndim == 1 else X[:, 0]]
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("state-action rewards need (n, 2) index rows")
        return vals[X[:, 0], X[:, 1]]

    def score(self, X, y=None) -> float:
        """Negative training objective, so that higher is better."""
        check_is_fitted(self, "reward_")
        return -ranking_objective(_check_dataset(X), self.reward_, self.loss, self._config())


class RankGameImitator(BaseEstimator):
    """Imitation by playing the ranking game (PAL or RAL) on a tabular MDP.

    ``fit(mdp, expert)`` runs the game; ``predict`` returns greedy actions of
    the learned policy and ``predict_proba`` its action distribution.
    """

    def __init__(self, leader="policy", loss="lk", k=None, rounds=100, temperature=0.1, policy_lr=0.5,
                 n_pol=None, n_rew=None, p=5, shaping_kind="exponential", shaping_beta=-1.0, lam=0.3,
                 reward_lr=1e-3, l2=1e-4, batch_size=1024, ral_policy_factor=4, use_empirical=False,
                 rollouts_per_round=1, reward_solver=None, seed=0):
        self.leader = leader
        self.loss = loss
        self.k = k
        self.rounds = rounds
        self.temperature = temperature
        self.policy_lr = policy_lr
        self.n_pol = n_pol
        self.n_rew = n_rew
        self.p = p
        self.shaping_kind = shaping_kind
        self.shaping_beta = shaping_beta
        self.lam = lam
        self.reward_lr = reward_lr
        self.l2 = l2
        self.batch_size = batch_size
        self.ral_policy_factor = ral_policy_factor
        self.use_empirical = use_empirical
        self.rollouts_per_round = rollouts_per_round
        self.reward_solver = reward_solver
        self.seed = seed

    def game_config(self) -> GameConfig:
        return GameConfig(
            leader=self.leader, loss_kind=self.loss, k=self.k, n_pol=self.n_pol, n_rew=self.n_rew, p=self.p,
            shaping=ShapingFamily(self.shaping_kind, self.shaping_beta), lam=self.lam,
            temperature=self.temperature, policy_lr=self.policy_lr, ral_policy_factor=self.ral_policy_factor,
            rounds=self.rounds, seed=self.seed, use_empirical=self.use_empirical,
            rollouts_per_round=self.rollouts_per_round, reward_lr=self.reward_lr, l2=self.l2,
            batch_size=self.batch_size, reward_solver=self.reward_solver,
        )

    def fit(self, X: TabularMdp, y: Visitation, **game_kwargs):
        if not isinstance(X, TabularMdp) or not isinstance(y, Visitation):
            raise TypeError("fit expects (TabularMdp, expert Visitation)")
        state = run_game(X, y, self.game_config(), **game_kwargs)
        self.policy_ = state.policy
        self.reward_ = state.reward
        self.history_ = state.history
        self.env_steps_ = state.env_steps
        return self

    def predict_proba(self, states=None) -> np.ndarray:
        check_is_fitted(self, "policy_")
        probs = self.policy_.probs
        return probs if states is None else probs[np.asarray(states, dtype=int)]

    def predict(self, states=None) -> np.ndarray:
        return np.argmax(self.predict_proba(states), axis=-1)

    @property
    def policy(self) -> Policy:
        check_is_fitted(self, "policy_")
        return self.policy_
