"""Stage games: two-player normal-form games and the Keynes Beauty Contest.

Everything here is a pure function of its inputs; the game objects are
frozen and safe to share between threads or runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REWARD_SCHEMES = ("abs", "square")


@dataclass(frozen=True)
class NormalFormGame:
    """A two-player game given by one payoff matrix per player.

    ``row_payoffs[r, c]`` and ``col_payoffs[r, c]`` are the payoffs when
    the row player picks action ``r`` and the column player picks ``c``.
    """

    row_payoffs: np.ndarray
    col_payoffs: np.ndarray

    def __post_init__(self):
        rp = np.asarray(self.row_payoffs, dtype=float)
        cp = np.asarray(self.col_payoffs, dtype=float)
        object.__setattr__(self, "row_payoffs", rp)
        object.__setattr__(self, "col_payoffs", cp)
        if rp.ndim != 2 or rp.shape != cp.shape:
            raise ValueError(
                f"payoff matrices must share one 2-D shape, got {rp.shape} and {cp.shape}"
            )
        if not (np.isfinite(rp).all() and np.isfinite(cp).all()):
            raise ValueError("payoff entries must be finite")
        rp.setflags(write=False)
        cp.setflags(write=False)

    @property
    def action_counts(self) -> tuple[int, int]:
        return self.row_payoffs.shape  # type: ignore[return-value]

    @property
    def is_2x2(self) -> bool:
        return self.row_payoffs.shape == (2, 2)


@dataclass(frozen=True)
class MixedStrategyPair:
    """(alpha, beta): each player's probability of playing their first action."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"strategies must lie in [0,1]^2, got {(self.alpha, self.beta)}")


@dataclass(frozen=True)
class BeautyContestEnv:
    """n players guess in [low, high]; closest to p times the average wins.

    Rewards are per-agent distances to the target (negated), under either
    the absolute-difference scheme ("abs", default) or its square.
    """

    n: int
    p: float
    low: float = 0.0
    high: float = 100.0
    reward_scheme: str = "abs"
    steps_per_iteration: int = 10

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two players")
        if self.p <= 0:
            raise ValueError("p must be positive")
        if not self.low < self.high:
            raise ValueError("low must be below high")
        if self.reward_scheme not in REWARD_SCHEMES:
            raise ValueError(f"reward_scheme must be one of {REWARD_SCHEMES}")
        if self.steps_per_iteration < 1:
            raise ValueError("steps_per_iteration must be positive")

    @property
    def n_agents(self) -> int:
        return self.n

    @property
    def nash_action(self) -> float:
        """The bounded game's equilibrium guess: low for p<1, high for p>1."""
        if self.p < 1.0:
            return self.low
        if self.p > 1.0:
            return self.high
        raise ValueError("p=1 has a continuum of equilibria")

    def step(self, actions: Sequence[float]) -> np.ndarray:
        return beauty_step(self, actions)


@dataclass(frozen=True)
class MatrixSelfPlayEnv:
    """Training adapter for a 2x2 game with mixed strategies as actions.

    Agent 0 is the row player, agent 1 the column player; each emits a
    scalar in [0,1] read as the probability of its first action, and the
    per-step rewards are the bilinear expected payoffs.
    """

    game: NormalFormGame
    steps_per_iteration: int = 25
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.game.is_2x2:
            raise ValueError("self-play adapter requires a 2x2 game")

    @property
    def n_agents(self) -> int:
        return 2

    def step(self, actions: Sequence[float]) -> np.ndarray:
        alpha, beta = float(actions[0]), float(actions[1])
        v_r, v_c = expected_payoffs(self.game, MixedStrategyPair(alpha, beta))
        return np.array([v_r, v_c])


@dataclass(frozen=True)
class Transition:
    """One environment step as stored by the trainers."""

    state: object
    actions: tuple
    rewards: tuple
    next_state: object
    terminal: bool

    def __post_init__(self):
        if len(self.actions) != len(self.rewards):
            raise ValueError("actions and rewards must have one entry per agent")


def payoff(game: NormalFormGame, row_action: int, col_action: int) -> tuple[float, float]:
    """Payoff pair for a pure action profile."""
    n_rows, n_cols = game.action_counts
    if not (0 <= row_action < n_rows and 0 <= col_action < n_cols):
        raise IndexError(
            f"action profile {(row_action, col_action)} outside {game.action_counts}"
        )
    return (
        float(game.row_payoffs[row_action, col_action]),
        float(game.col_payoffs[row_action, col_action]),
    )


def expected_payoffs(game: NormalFormGame, strategies: MixedStrategyPair) -> tuple[float, float]:
    """Bilinear expected payoffs (V_r, V_c) of a 2x2 game at mixed strategies."""
    if not game.is_2x2:
        raise ValueError(f"expected_payoffs needs a 2x2 game, got {game.action_counts}")
    a, b = strategies.alpha, strategies.beta
    probs = np.array([a * b, a * (1 - b), (1 - a) * b, (1 - a) * (1 - b)])
    v_r = float(probs @ game.row_payoffs.ravel())
    v_c = float(probs @ game.col_payoffs.ravel())
    return v_r, v_c


def beauty_step(env: BeautyContestEnv, actions: Sequence[float]) -> np.ndarray:
    """Per-agent rewards for one play of the Beauty Contest.

    Out-of-bounds guesses are an error, not clipped: silent clipping would
    hide a broken policy squash upstream.
    """
    acts = np.asarray(actions, dtype=float)
    if acts.shape != (env.n,):
        raise ValueError(f"expected {env.n} actions, got shape {acts.shape}")
    if (acts < env.low).any() or (acts > env.high).any():
        raise ValueError(f"actions outside [{env.low}, {env.high}]: {acts}")
    target = env.p * acts.mean()
    diff = np.abs(acts - target)
    if env.reward_scheme == "abs":
        return -diff
    return -(diff**2)


def rotational_game() -> NormalFormGame:
    """2x2 game with a single mixed equilibrium at (0.5, 0.5)."""
    return NormalFormGame(
        row_payoffs=np.array([[0.0, 3.0], [1.0, 2.0]]),
        col_payoffs=np.array([[3.0, 2.0], [0.0, 1.0]]),
    )


def stag_hunt() -> NormalFormGame:
    """Stag Hunt; first action is S (stag), second is P (plant)."""
    return NormalFormGame(
        row_payoffs=np.array([[4.0, 1.0], [3.0, 2.0]]),
        col_payoffs=np.array([[4.0, 3.0], [1.0, 2.0]]),
    )


NAMED_GAMES = {
    "rotational": rotational_game,
    "stag_hunt": stag_hunt,
}


def named_game(name: str) -> NormalFormGame:
    try:
        return NAMED_GAMES[name]()
    except KeyError:
        raise KeyError(f"unknown game {name!r}; known: {sorted(NAMED_GAMES)}") from None


def game_from_dict(spec: dict):
    """Build a game or Beauty Contest environment from a definition mapping.

    Matrix games: {"type": "matrix", "row_payoffs": [...], "col_payoffs": [...]}.
    Beauty Contest: {"type": "beauty", "n": int, "p": float,
    "reward_scheme": "abs"|"square"} plus optional bounds and step counts.
    A bare {"name": "rotational"} picks a built-in.
    """
    if "name" in spec:
        return named_game(spec["name"])
    kind = spec.get("type")
    if kind == "matrix":
        return NormalFormGame(
            row_payoffs=np.array(spec["row_payoffs"], dtype=float),
            col_payoffs=np.array(spec["col_payoffs"], dtype=float),
        )
    if kind == "beauty":
        kwargs = {}
        for key in ("low", "high", "reward_scheme", "steps_per_iteration"):
            if key in spec:
                kwargs[key] = spec[key]
        return BeautyContestEnv(n=int(spec["n"]), p=float(spec["p"]), **kwargs)
    raise ValueError(f"game spec needs type 'matrix' or 'beauty' (or a built-in name), got {spec!r}")


def load_game(path) -> NormalFormGame | BeautyContestEnv:
    with open(path) as fh:
        return game_from_dict(json.load(fh))
