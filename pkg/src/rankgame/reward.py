"""Bounded reward functions over state-action pairs or states.

Reward tables always carry one extra row for the absorbing state used to pad
early-terminated trajectories. That row is pinned to zero for tabular rewards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._validation import as_float_array, frozen

STATE_ACTION = "state_action"
STATE_ONLY = "state_only"
DEFAULT_CLAMP = (-10.0, 10.0)


@dataclass(frozen=True, eq=False)
class RewardFn:
    """Reward table ``R(s, a)`` (or ``R(s)``) clipped to ``clamp_range``.

    With ``features`` set, the reward is linear: ``R = clip(features @ params)``
    where ``features`` has shape ``(n_states + 1, n_actions, d)`` for the
    state-action kind or ``(n_states + 1, d)`` for the state-only kind.
    Without features, ``params`` is the table itself (identity feature map).
    """

    kind: str
    params: np.ndarray
    clamp_range: tuple[float, float] = DEFAULT_CLAMP
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (STATE_ACTION, STATE_ONLY):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        lo, hi = (float(v) for v in self.clamp_range)
        if not lo <= hi:
            raise ValueError(f"clamp_range must satisfy lo <= hi, got {self.clamp_range}")
        object.__setattr__(self, "clamp_range", (lo, hi))
        params = as_float_array(self.params, "params")
        if self.features is None:
            expected = 2 if self.kind == STATE_ACTION else 1
            if params.ndim != expected:
                raise ValueError(f"tabular {self.kind} reward needs a {expected}-d table, got {params.shape}")
            params = params.copy()
            params[-1] = 0.0
        else:
            feats = as_float_array(self.features, "features")
            expected = 3 if self.kind == STATE_ACTION else 2
            if feats.ndim != expected or params.shape != (feats.shape[-1],):
                raise ValueError(
                    f"linear {self.kind} reward needs features of ndim {expected} and "
                    f"weights of length d; got {feats.shape} and {params.shape}"
                )
            object.__setattr__(self, "features", frozen(feats))
        object.__setattr__(self, "params", frozen(params))

    @classmethod
    def tabular(cls, n_states, n_actions=1, kind=STATE_ACTION, init=0.0, clamp_range=DEFAULT_CLAMP):
        shape = (n_states + 1, n_actions) if kind == STATE_ACTION else (n_states + 1,)
        return cls(kind, np.full(shape, float(init)), clamp_range)

    @classmethod
    def linear(cls, features, weights=None, clamp_range=DEFAULT_CLAMP):
        features = np.asarray(features, dtype=float)
        kind = STATE_ACTION if features.ndim == 3 else STATE_ONLY
        if weights is None:
            weights = np.zeros(features.shape[-1])
        return cls(kind, weights, clamp_range, features)

    @classmethod
    def from_table(cls, table, clamp_range=DEFAULT_CLAMP):
        """Wrap a reward table without an absorbing row (shape ``(S, A)`` or ``(S,)``)."""
        table = np.asarray(table, dtype=float)
        kind = STATE_ACTION if table.ndim == 2 else STATE_ONLY
        pad = np.zeros((1,) + table.shape[1:])
        return cls(kind, np.concatenate([table, pad]), clamp_range)

    @property
    def is_linear(self) -> bool:
        return self.features is not None

    @property
    def state_only(self) -> bool:
        return self.kind == STATE_ONLY

    @property
    def n_states(self) -> int:
        rows = self.features.shape[0] if self.is_linear else self.params.shape[0]
        return rows - 1

    def raw_values(self) -> np.ndarray:
        if self.is_linear:
            return self.features @ self.params
        return np.asarray(self.params)

    def values(self) -> np.ndarray:
        """Clipped reward table including the absorbing row."""
        return np.clip(self.raw_values(), *self.clamp_range)

    def mdp_table(self, n_actions: int) -> np.ndarray:
        """Reward over the MDP's own states as an ``(S, A)`` table."""
        vals = self.values()[:-1]
        if self.state_only:
            return np.repeat(vals[:, None], n_actions, axis=1)
        return vals

    def aligned(self, shape: tuple[int, ...]) -> np.ndarray:
        """Reward values laid out like a visitation table of ``shape``."""
        vals = self.values()
        rows = shape[0]
        if rows > vals.shape[0]:
            raise ValueError(f"visitation has {rows} rows but reward covers {vals.shape[0]}")
        vals = vals[:rows]
        if len(shape) == 2 and self.state_only:
            return np.repeat(vals[:, None], shape[1], axis=1)
        if len(shape) == 1 and not self.state_only:
            raise ValueError("state-only visitations need a state_only reward")
        if vals.shape != tuple(shape):
            raise ValueError(f"reward shape {vals.shape} does not match visitation {shape}")
        return vals

    def to_value_space(self, table: np.ndarray) -> np.ndarray:
        """Map a visitation-shaped table onto the reward's value table layout.

        Rows missing the absorbing entry are zero-padded; for state-only
        rewards the action axis is summed out.
        """
        table = np.asarray(table, dtype=float)
        if self.state_only and table.ndim == 2:
            table = table.sum(axis=1)
        full_rows = self.n_states + 1
        if table.shape[0] < full_rows:
            pad = np.zeros((full_rows - table.shape[0],) + table.shape[1:])
            table = np.concatenate([table, pad])
        return table

    def backprop(self, grad_values: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. the value table into a gradient w.r.t. params."""
        if not self.is_linear:
            g = np.array(grad_values, dtype=float)
            g[-1] = 0.0
            return g
        raw = self.raw_values()
        lo, hi = self.clamp_range
        live = (raw > lo) & (raw < hi)
        g = np.where(live, grad_values, 0.0)
        axes = g.ndim
        return np.tensordot(g, self.features, axes=(tuple(range(axes)), tuple(range(axes))))

    def project(self, params: np.ndarray) -> np.ndarray:
        """Clamp step for tabular params; linear params are left free."""
        if self.is_linear:
            return params
        return np.clip(params, *self.clamp_range)

    def with_params(self, params) -> "RewardFn":
        return replace(self, params=np.asarray(params, dtype=float))
