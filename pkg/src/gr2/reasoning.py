"""Recursive-reasoning core: soft operators, opponent posteriors, level-k
rollouts, and Poisson mixing over levels.

Nothing in this module learns; it evaluates fixed Q tables and fixed
per-level policies. The learning and analysis modules both build on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

Action = Hashable
State = Hashable


@dataclass(frozen=True)
class JointQView:
    """Read-only view of a joint Q table Q(s, a_own, a_opp).

    ``values`` maps (state, own action, opponent action) to a finite real;
    the supports fix the ordering used by row extraction and posteriors.
    """

    values: Mapping[tuple, float]
    own_action_support: tuple
    opp_action_support: tuple

    def __post_init__(self):
        object.__setattr__(self, "own_action_support", tuple(self.own_action_support))
        object.__setattr__(self, "opp_action_support", tuple(self.opp_action_support))
        for key, val in self.values.items():
            if not math.isfinite(val):
                raise ValueError(f"non-finite Q value at {key}: {val}")

    def row(self, s: State, a_own: Action) -> np.ndarray:
        """Q(s, a_own, ·) over the opponent support, in support order."""
        try:
            return np.array(
                [self.values[(s, a_own, b)] for b in self.opp_action_support], dtype=float
            )
        except KeyError as missing:
            raise KeyError(f"no Q entry for state {s!r}, actions {a_own!r}/{missing}") from None


@dataclass(frozen=True)
class PoissonMixture:
    """Truncated Poisson weights over reasoning levels 0..max_level."""

    lambda_mean: float
    max_level: int
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", poisson_weights(self.lambda_mean, self.max_level))


@dataclass(frozen=True)
class LevelKStack:
    """Per-level conditional policies plus an unconditioned base policy.

    ``own_conditional(level, s, a_opp)`` and ``opp_conditional(level, s,
    a_own)`` receive the level index so shared-parity implementations can
    dispatch on it; deterministic throughout, as the inner rollouts demand.
    """

    own_conditional: Callable[[int, State, Action], Action]
    opp_conditional: Callable[[int, State, Action], Action]
    level0: Callable[[State], Action]
    max_level: int

    def __post_init__(self):
        if self.max_level < 0:
            raise ValueError("max_level must be >= 0")


def soft_max_operator(q_row: Sequence[float]) -> float:
    """Max-shifted log-sum-exp of a vector, the soft stand-in for max."""
    row = np.asarray(q_row, dtype=float)
    if row.size == 0:
        raise ValueError("soft_max_operator needs a non-empty vector")
    if not np.isfinite(row).all():
        raise ValueError("soft_max_operator needs finite entries")
    shift = row.max()
    return float(shift + np.log(np.exp(row - shift).sum()))


def marginal_q_logsumexp(q: JointQView, s: State, a_own: Action) -> float:
    """Q(s, a_own) = log sum_b exp Q(s, a_own, b), the soft Bellman marginal."""
    return soft_max_operator(q.row(s, a_own))


def opponent_posterior(q: JointQView, s: State, a_own: Action) -> np.ndarray:
    """Softmax of the joint-Q row: the best-fit opponent distribution.

    Equals exp(Q(s, a_own, ·) − marginal_q_logsumexp) componentwise; the
    shared max-shift keeps it exact for rows spanning large magnitudes.
    """
    row = q.row(s, a_own)
    shifted = np.exp(row - row.max())
    return shifted / shifted.sum()


def weighted_marginal_q(
    q: JointQView, rho: Sequence[float], s: State, a_own: Action
) -> float:
    """log sum_j rho_j exp Q(s, a_own, j): the posterior-weighted marginal."""
    row = q.row(s, a_own)
    weights = np.asarray(rho, dtype=float)
    if weights.shape != row.shape:
        raise ValueError(
            f"rho has shape {weights.shape}, opponent support has {row.shape}"
        )
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"rho must sum to 1, got {weights.sum()!r}")
    shift = row.max()
    return float(shift + np.log((weights * np.exp(row - shift)).sum()))


def level_k_rollout(stack: LevelKStack, s: State, k: int) -> tuple[Action, tuple]:
    """Deterministic level-k action and its inter-level trace.

    The trace lists (a_k, b_{k-1}, a_{k-2}, ...) top down, alternating own
    and opponent roles, length k+1. Level k responds to the level-(k-1)
    opponent action, which in turn responds to the own level-(k-2) action;
    at k=1 the opponent model conditions on the level-0 own action, which
    stays out of the trace.
    """
    if not 0 <= k <= stack.max_level:
        raise ValueError(f"level {k} outside 0..{stack.max_level}")
    if k == 0:
        base = stack.level0(s)
        return base, (base,)
    if k == 1:
        below = stack.level0(s)
        tail: tuple = ()
    else:
        below, tail = level_k_rollout(stack, s, k - 2)
    b_prev = stack.opp_conditional(k - 1, s, below)
    a_top = stack.own_conditional(k, s, b_prev)
    return a_top, (a_top, b_prev) + tail


def poisson_weights(lambda_mean: float, k: int) -> np.ndarray:
    """Truncated Poisson pmf over 0..k: weights[m] ∝ λ^m / m!.

    The e^{−λ} factors cancel in the normalization. Computed by the
    ratio recurrence t_m = t_{m−1}·(λ/m) so consecutive weight ratios
    stay at λ/m to machine precision.
    """
    if lambda_mean <= 0:
        raise ValueError(f"lambda_mean must be positive, got {lambda_mean}")
    if k < 0:
        raise ValueError(f"max level must be >= 0, got {k}")
    terms = np.empty(k + 1)
    terms[0] = 1.0
    for m in range(1, k + 1):
        terms[m] = terms[m - 1] * (lambda_mean / m)
    if not np.isfinite(terms).all():
        # extreme λ: redo in log domain, same normalization
        logs = np.array([m * math.log(lambda_mean) - math.lgamma(m + 1) for m in range(k + 1)])
        terms = np.exp(logs - logs.max())
    return terms / terms.sum()


def mix_levels(
    stack: LevelKStack, s: State, mixture: PoissonMixture, discrete: bool = False
):
    """GR2-M aggregation of the per-level rollout actions.

    Continuous actions: the Poisson-weighted average (a point action).
    Discrete actions (``discrete=True``): the mixture as a dict mapping
    each distinct level action to its total weight; sampling or argmax is
    the caller's choice.
    """
    if mixture.max_level > stack.max_level:
        raise ValueError(
            f"mixture over levels 0..{mixture.max_level} exceeds stack max {stack.max_level}"
        )
    actions = [level_k_rollout(stack, s, m)[0] for m in range(mixture.max_level + 1)]
    if discrete:
        dist: dict = {}
        for act, w in zip(actions, mixture.weights):
            dist[act] = dist.get(act, 0.0) + float(w)
        return dist
    return float(np.dot(mixture.weights, np.asarray(actions, dtype=float)))
