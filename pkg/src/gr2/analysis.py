"""Brute-force oracles for small normal-form games.

Nothing in this module learns or approximates: best responses are found
by enumerating pure actions, Nash checks report exact per-player regrets,
and the level-k chains are plain fixed-point iterations of the
best-response map. The trainers and the ODE integrators elsewhere in the
package are validated against these functions, so clarity beats speed
throughout.

`verify_nash_absorption` mechanises one qualitative claim about recursive
reasoners: once the best-response chain lands on a pure Nash profile,
every higher level keeps playing it. With unique best responses that is
a two-line fixed-point argument; under ties it can genuinely fail (the
lowest-index rule may hop to a payoff-equivalent action and break the
repetition), which is why `absorption_battery` screens tied games out of
its random sample.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .games import BeautyContestEnv, MixedStrategyPair, NormalFormGame

ARGMAX_TOL = 1e-12


class TieRule(enum.Enum):
    LOWEST_INDEX = "LowestIndex"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class StrategyProfile:
    """One mixed strategy per player, as probability vectors."""

    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        for name in ("row", "col"):
            v = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, v)
            if v.ndim != 1 or v.size == 0:
                raise ValueError(f"{name} strategy must be a nonempty vector, got shape {v.shape}")
            if (v < -1e-12).any():
                raise ValueError(f"{name} strategy has negative entries: {v}")
            if abs(float(v.sum()) - 1.0) > 1e-9:
                raise ValueError(f"{name} strategy sums to {v.sum()}, not 1")

    @property
    def is_pure(self) -> bool:
        return float(self.row.max()) >= 1.0 - 1e-12 and float(self.col.max()) >= 1.0 - 1e-12

    def pure_actions(self) -> tuple[int, int]:
        if not self.is_pure:
            raise ValueError("profile is mixed, no pure actions to report")
        return int(self.row.argmax()), int(self.col.argmax())


def uniform_profile(game: NormalFormGame) -> StrategyProfile:
    n_rows, n_cols = game.action_counts
    return StrategyProfile(np.full(n_rows, 1.0 / n_rows), np.full(n_cols, 1.0 / n_cols))


def pure_profile(game: NormalFormGame, row_action: int, col_action: int) -> StrategyProfile:
    n_rows, n_cols = game.action_counts
    row = np.zeros(n_rows)
    col = np.zeros(n_cols)
    row[row_action] = 1.0
    col[col_action] = 1.0
    return StrategyProfile(row, col)


def from_mixed_pair(pair: MixedStrategyPair) -> StrategyProfile:
    """Lift the 2x2 (alpha, beta) convention to explicit probability vectors."""
    return StrategyProfile(
        np.array([pair.alpha, 1.0 - pair.alpha]), np.array([pair.beta, 1.0 - pair.beta])
    )


def _payoff_vector(game: NormalFormGame, player: str, opp_strategy: np.ndarray) -> np.ndarray:
    """Expected payoff of each own pure action against the given opponent mix."""
    opp = np.asarray(opp_strategy, dtype=float)
    if (opp < -1e-12).any() or abs(float(opp.sum()) - 1.0) > 1e-9:
        raise ValueError(f"opponent strategy is not a distribution: {opp}")
    if player == "row":
        if opp.shape != (game.action_counts[1],):
            raise ValueError(f"column strategy must have {game.action_counts[1]} entries")
        return game.row_payoffs @ opp
    if player == "col":
        if opp.shape != (game.action_counts[0],):
            raise ValueError(f"row strategy must have {game.action_counts[0]} entries")
        return opp @ game.col_payoffs
    raise ValueError(f"player must be 'row' or 'col', got {player!r}")


def best_response(game: NormalFormGame, player: str, opp_strategy) -> set[int]:
    """All pure actions maximising expected payoff against the opponent mix.

    Ties within ARGMAX_TOL of the maximum are kept, so an exact tie like
    the Stag Hunt row player against a uniform column returns both actions.
    """
    values = _payoff_vector(game, player, opp_strategy)
    best = float(values.max())
    return {int(i) for i in np.flatnonzero(values >= best - ARGMAX_TOL)}


@dataclass(frozen=True)
class NashReport:
    is_nash: bool
    regrets: tuple[float, float]


def is_nash(game: NormalFormGame, profile: StrategyProfile, epsilon: float = 1e-9) -> NashReport:
    """Check a profile by measuring each player's best-response regret."""
    row_values = _payoff_vector(game, "row", profile.col)
    col_values = _payoff_vector(game, "col", profile.row)
    v_row = float(profile.row @ row_values)
    v_col = float(profile.col @ col_values)
    regrets = (
        max(0.0, float(row_values.max()) - v_row),
        max(0.0, float(col_values.max()) - v_col),
    )
    return NashReport(is_nash=regrets[0] <= epsilon and regrets[1] <= epsilon, regrets=regrets)


def exploitability(game: NormalFormGame, profile: StrategyProfile) -> float:
    """Sum of per-player best-response regrets; zero exactly at Nash."""
    report = is_nash(game, profile)
    return report.regrets[0] + report.regrets[1]


def mixed_nash_2x2(game: NormalFormGame) -> StrategyProfile | None:
    """Interior mixed equilibrium of a 2x2 game by indifference, or None.

    alpha makes the column player indifferent and beta the row player, so
    each comes from the opponent's payoff matrix. Degenerate games (a zero
    denominator) and probabilities outside (0, 1) return None.
    """
    if not game.is_2x2:
        raise ValueError(f"mixed_nash_2x2 needs a 2x2 game, got {game.action_counts}")
    r = game.row_payoffs
    c = game.col_payoffs
    den_a = c[0, 0] - c[1, 0] - c[0, 1] + c[1, 1]
    den_b = r[0, 0] - r[0, 1] - r[1, 0] + r[1, 1]
    if den_a == 0.0 or den_b == 0.0:
        return None
    alpha = (c[1, 1] - c[1, 0]) / den_a
    beta = (r[1, 1] - r[0, 1]) / den_b
    if not (0.0 < alpha < 1.0 and 0.0 < beta < 1.0):
        return None
    return StrategyProfile(np.array([alpha, 1.0 - alpha]), np.array([beta, 1.0 - beta]))


@dataclass(frozen=True)
class LevelKTrace:
    """Per-level entries, ascending from level 0 to level k.

    Matrix games store a StrategyProfile per level; the Beauty Contest
    stores one representative guess per level.
    """

    levels: tuple
    tie_rule: TieRule

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("a trace holds at least the level-0 entry")

    @property
    def k(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level):
        return self.levels[level]


def _respond(values: np.ndarray, tie_rule: TieRule) -> np.ndarray:
    """Turn a payoff vector into a strategy under the tie rule."""
    best = float(values.max())
    winners = np.flatnonzero(values >= best - ARGMAX_TOL)
    out = np.zeros(values.shape[0])
    if tie_rule is TieRule.LOWEST_INDEX:
        out[winners[0]] = 1.0
    else:
        out[winners] = 1.0 / winners.size
    return out


def _beauty_level_up(env: BeautyContestEnv, prev: float, tie_rule: TieRule, analytic: bool,
                     grid: np.ndarray | None) -> float:
    if analytic:
        # Many-player limit: own influence on the average vanishes, the
        # best reply is p times the previous level's guess, clamped.
        return min(max(env.p * prev, env.low), env.high)
    assert grid is not None
    target = env.p * (grid + (env.n - 1) * prev) / env.n
    scores = -np.abs(grid - target)
    best = float(scores.max())
    winners = np.flatnonzero(scores >= best - ARGMAX_TOL)
    if tie_rule is TieRule.LOWEST_INDEX:
        return float(grid[winners[0]])
    return float(grid[winners].mean())


def exact_level_k(game, k: int, level0=None, tie_rule: TieRule = TieRule.LOWEST_INDEX,
                  analytic: bool = False, grid_points: int = 101) -> LevelKTrace:
    """Iterated exact best responses, levels 0..k, both players at once.

    Matrix games: level 0 defaults to the uniform profile, and level m
    best-responds to the opponent's level m-1 strategy. The Beauty
    Contest runs on one representative guess per level; level 0 defaults
    to the midpoint. With `analytic` set the guess follows the
    many-player map (p times the previous guess), otherwise each level is
    a brute-force argmax over an evenly spaced grid of `grid_points`
    guesses with all opponents sitting at the previous level's guess.
    """
    if k < 0:
        raise ValueError(f"level must be nonnegative, got {k}")
    if isinstance(game, BeautyContestEnv):
        a0 = 0.5 * (game.low + game.high) if level0 is None else float(level0)
        if not game.low <= a0 <= game.high:
            raise ValueError(f"level-0 guess {a0} outside [{game.low}, {game.high}]")
        grid = None if analytic else np.linspace(game.low, game.high, grid_points)
        levels = [a0]
        for _ in range(k):
            levels.append(_beauty_level_up(game, levels[-1], tie_rule, analytic, grid))
        return LevelKTrace(levels=tuple(levels), tie_rule=tie_rule)
    if not isinstance(game, NormalFormGame):
        raise TypeError(f"expected a NormalFormGame or BeautyContestEnv, got {type(game)!r}")
    profile = uniform_profile(game) if level0 is None else level0
    levels = [profile]
    for _ in range(k):
        prev = levels[-1]
        row = _respond(_payoff_vector(game, "row", prev.col), tie_rule)
        col = _respond(_payoff_vector(game, "col", prev.row), tie_rule)
        levels.append(StrategyProfile(row, col))
    return LevelKTrace(levels=tuple(levels), tie_rule=tie_rule)


def level_dominance_gaps(game: NormalFormGame, trace: LevelKTrace) -> np.ndarray:
    """Payoff of level m vs the level-(m-1) opponent, minus level m-2's.

    Row m of the result holds the (row player, column player) gaps at
    level m+2. Both are nonnegative by construction: the level-m strategy
    is an argmax against exactly that opponent.
    """
    gaps = []
    for m in range(2, trace.k + 1):
        opp_row = trace[m - 1].col
        opp_col = trace[m - 1].row
        row_gap = float(
            trace[m].row @ game.row_payoffs @ opp_row
            - trace[m - 2].row @ game.row_payoffs @ opp_row
        )
        col_gap = float(
            opp_col @ game.col_payoffs @ trace[m].col
            - opp_col @ game.col_payoffs @ trace[m - 2].col
        )
        gaps.append((row_gap, col_gap))
    return np.array(gaps).reshape(-1, 2)


@dataclass(frozen=True)
class AbsorptionReport:
    holds: bool
    first_nash_level: int | None
    counterexample: str | None


def verify_nash_absorption(game: NormalFormGame, k_max: int,
                           tie_rule: TieRule = TieRule.LOWEST_INDEX,
                           epsilon: float = 1e-12) -> AbsorptionReport:
    """Check that a pure Nash profile, once reached, absorbs the chain.

    Runs the exact chain for both players to k_max. If some level m >= 1
    plays a pure profile that is Nash within epsilon, every later level
    must repeat that exact profile. A chain that never reaches a pure
    Nash passes vacuously with first_nash_level None.
    """
    trace = exact_level_k(game, k_max, tie_rule=tie_rule)
    first = None
    for m in range(1, trace.k + 1):
        if trace[m].is_pure and is_nash(game, trace[m], epsilon).is_nash:
            first = m
            break
    if first is None:
        return AbsorptionReport(holds=True, first_nash_level=None, counterexample=None)
    anchor = trace[first].pure_actions()
    for m in range(first + 1, trace.k + 1):
        if not trace[m].is_pure or trace[m].pure_actions() != anchor:
            later = trace[m].pure_actions() if trace[m].is_pure else "a mixed profile"
            return AbsorptionReport(
                holds=False,
                first_nash_level=first,
                counterexample=f"level {m} plays {later} after Nash {anchor} at level {first}",
            )
    return AbsorptionReport(holds=True, first_nash_level=first, counterexample=None)


def has_pure_nash(game: NormalFormGame) -> bool:
    r = game.row_payoffs
    c = game.col_payoffs
    n_rows, n_cols = game.action_counts
    for i in range(n_rows):
        for j in range(n_cols):
            if r[i, j] >= r[:, j].max() and c[i, j] >= c[i, :].max():
                return True
    return False


def has_unique_pure_best_responses(game: NormalFormGame) -> bool:
    """True when every best response to a pure opponent action is unique."""
    r = game.row_payoffs
    c = game.col_payoffs
    n_rows, n_cols = game.action_counts
    for j in range(n_cols):
        col = r[:, j]
        if (col >= col.max() - ARGMAX_TOL).sum() > 1:
            return False
    for i in range(n_rows):
        row = c[i, :]
        if (row >= row.max() - ARGMAX_TOL).sum() > 1:
            return False
    return True


def random_game_with_pure_nash(rng: np.random.Generator, shape=(2, 2),
                              payoff_high: int = 100) -> NormalFormGame:
    """Random integer-payoff game with a pure Nash and no pure-action ties.

    Rejection sampling. The no-ties condition keeps the lowest-index
    chain well defined, which is what makes absorption a theorem rather
    than a coin flip; see the module docstring.
    """
    while True:
        game = NormalFormGame(
            row_payoffs=rng.integers(0, payoff_high, size=shape).astype(float),
            col_payoffs=rng.integers(0, payoff_high, size=shape).astype(float),
        )
        if has_unique_pure_best_responses(game) and has_pure_nash(game):
            return game


@dataclass(frozen=True)
class BatteryReport:
    count: int
    reached_nash: int
    holds: bool
    failures: tuple[str, ...]
    verdicts: tuple[str, ...]


def absorption_battery(seed: int = 0, count: int = 200, k_max: int = 8,
                       sizes=((2, 2), (3, 3))) -> BatteryReport:
    """Absorption check over random 2x2 and 3x3 integer-payoff games."""
    rng = np.random.default_rng(seed)
    reached = 0
    failures = []
    verdicts = []
    for idx in range(count):
        shape = sizes[idx % len(sizes)]
        game = random_game_with_pure_nash(rng, shape=shape)
        report = verify_nash_absorption(game, k_max)
        tag = f"game {idx} ({shape[0]}x{shape[1]})"
        if report.first_nash_level is None:
            verdicts.append(f"{tag}: chain never reached a pure Nash, vacuous pass")
        elif report.holds:
            reached += 1
            verdicts.append(f"{tag}: Nash at level {report.first_nash_level}, held through {k_max}")
        else:
            reached += 1
            failures.append(f"{tag}: {report.counterexample}")
            verdicts.append(f"{tag}: FAILED, {report.counterexample}")
    return BatteryReport(
        count=count,
        reached_nash=reached,
        holds=not failures,
        failures=tuple(failures),
        verdicts=tuple(verdicts),
    )
