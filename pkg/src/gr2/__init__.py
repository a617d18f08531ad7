"""Generalized recursive reasoning for multi-agent learning.

Exact level-k and Poisson-mixture reasoning on small games, level-k
gradient dynamics with Lyapunov diagnostics, a desk-scale soft
actor-critic trainer with recursive opponent rollouts, brute-force
game-theory oracles, and a reproducible experiment CLI.
"""

from . import analysis, cli, dynamics, games, learning, reasoning
from .analysis import (
    LevelKTrace,
    StrategyProfile,
    best_response,
    exact_level_k,
    exploitability,
    is_nash,
    mixed_nash_2x2,
    verify_nash_absorption,
)
from .dynamics import Dynamics2x2, Verdict, classify, integrate
from .games import (
    BeautyContestEnv,
    MatrixSelfPlayEnv,
    NormalFormGame,
    named_game,
    rotational_game,
    stag_hunt,
)
from .learning import AgentBundle, TrainerConfig, make_agent, train
from .reasoning import (
    JointQView,
    LevelKStack,
    PoissonMixture,
    level_k_rollout,
    mix_levels,
    poisson_weights,
)

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "cli",
    "dynamics",
    "games",
    "learning",
    "reasoning",
    "AgentBundle",
    "BeautyContestEnv",
    "Dynamics2x2",
    "JointQView",
    "LevelKStack",
    "LevelKTrace",
    "MatrixSelfPlayEnv",
    "NormalFormGame",
    "PoissonMixture",
    "StrategyProfile",
    "TrainerConfig",
    "Verdict",
    "best_response",
    "classify",
    "exact_level_k",
    "exploitability",
    "integrate",
    "is_nash",
    "level_k_rollout",
    "make_agent",
    "mixed_nash_2x2",
    "mix_levels",
    "named_game",
    "poisson_weights",
    "rotational_game",
    "stag_hunt",
    "train",
    "verify_nash_absorption",
    "__version__",
]
