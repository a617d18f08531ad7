"""Level-k gradient dynamics on 2x2 games.

The row player's mixed strategy is alpha, the column player's is beta,
each the probability of the first action. Payoffs enter only through the
four coefficients (u_r, b_r, u_c, b_c); every level's vector field is an
affine map of (alpha, beta), so fields are precomputed as coefficient
triples and the integrator is a tight fixed-step RK4 on those triples.

Level construction: level 0 is plain gradient ascent on the expected
payoff. A level-k player (k >= 1) ascends against the opponent strategy
predicted one look-ahead step out, beta + zeta * (sum of the opponent's
strategic field components below level k); level 1, having no strategic
levels under it, looks ahead along the opponent's level-0 field. The
derivative of the quadratic Lyapunov function along the level-k field
then carries the factor (k-1 + ...) growth in k that makes higher levels
contract faster, and at levels 1..3 reduces to short closed forms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .accel import maybe_njit
from .games import MixedStrategyPair, NormalFormGame


class NotLyapunovCandidate(ValueError):
    """Raised when u_r * u_c >= 0 and no quadratic Lyapunov function applies."""


class IntegrationDiverged(RuntimeError):
    """Raised when the integrator produces a non-finite state."""


class Verdict(enum.Enum):
    CONVERGED_TO_CENTER = "ConvergedToCenter"
    CYCLING = "Cycling"
    BOUNDARY_ATTRACTED = "BoundaryAttracted"
    UNDETERMINED = "Undetermined"


@dataclass(frozen=True)
class Dynamics2x2:
    """Coefficients, look-ahead step and reasoning level of one dynamic."""

    u_r: float
    b_r: float
    u_c: float
    b_c: float
    zeta: float = 0.1
    level: int = 0

    def __post_init__(self):
        for name in ("u_r", "b_r", "u_c", "b_c", "zeta"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.level < 0:
            raise ValueError("level must be >= 0")

    @property
    def is_lyapunov_candidate(self) -> bool:
        """True when the game has the mixed-equilibrium structure u_r*u_c < 0."""
        return self.u_r * self.u_c < 0

    @classmethod
    def from_game(cls, game: NormalFormGame, zeta: float = 0.1, level: int = 0):
        u_r, b_r, u_c, b_c = derive_coefficients(game)
        return cls(u_r=u_r, b_r=b_r, u_c=u_c, b_c=b_c, zeta=zeta, level=level)


@dataclass(frozen=True)
class Center:
    """The interior fixed point (alpha*, beta*), with an in-square flag."""

    alpha: float
    beta: float
    interior: bool

    def __iter__(self):
        return iter((self.alpha, self.beta))


@dataclass(frozen=True)
class Trajectory:
    """An integrated path. ``points`` has shape (n, 2) with columns
    (alpha, beta); ``lyapunov_values`` is None when the game admits no
    quadratic Lyapunov function."""

    times: np.ndarray
    points: np.ndarray
    lyapunov_values: np.ndarray | None

    def __post_init__(self):
        if len(self.times) != len(self.points):
            raise ValueError("times and points must align")
        if self.lyapunov_values is not None and len(self.lyapunov_values) != len(self.points):
            raise ValueError("lyapunov_values must align with points")
        if self.points.size and (self.points.min() < 0.0 or self.points.max() > 1.0):
            raise ValueError("trajectory leaves the unit square")


@dataclass(frozen=True)
class ConvergenceReport:
    verdict: Verdict
    time_to_epsilon: float | None
    final_distance: float

    def __post_init__(self):
        has_time = self.time_to_epsilon is not None
        if has_time != (self.verdict is Verdict.CONVERGED_TO_CENTER):
            raise ValueError("time_to_epsilon is present exactly for ConvergedToCenter")


def derive_coefficients(game: NormalFormGame) -> tuple[float, float, float, float]:
    """(u_r, b_r, u_c, b_c) from the two payoff matrices.

    u_r = r11 - r12 - r21 + r22 and b_r = r12 - r22 in 1-based matrix
    notation; u_c, b_c likewise from the column player's matrix with the
    roles of the indices swapped.
    """
    if not game.is_2x2:
        raise ValueError(f"need a 2x2 game, got {game.action_counts}")
    r = game.row_payoffs
    c = game.col_payoffs
    u_r = float(r[0, 0] - r[0, 1] - r[1, 0] + r[1, 1])
    b_r = float(r[0, 1] - r[1, 1])
    u_c = float(c[0, 0] - c[0, 1] - c[1, 0] + c[1, 1])
    b_c = float(c[1, 0] - c[1, 1])
    return u_r, b_r, u_c, b_c


def center(dyn: Dynamics2x2) -> Center:
    """(alpha*, beta*) = (-b_c/u_c, -b_r/u_r), the shared fixed point."""
    if dyn.u_r == 0.0 or dyn.u_c == 0.0:
        raise ValueError("degenerate game: u_r and u_c must both be nonzero")
    alpha = -dyn.b_c / dyn.u_c
    beta = -dyn.b_r / dyn.u_r
    return Center(alpha, beta, interior=(0.0 < alpha < 1.0 and 0.0 < beta < 1.0))


def _affine_fields(dyn: Dynamics2x2) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Affine triples (const, d/dalpha, d/dbeta) of the level-k field pair.

    Fields below the requested level are accumulated as running sums so
    each level's look-ahead sees everything strategic beneath it.
    """
    a = (dyn.b_r, 0.0, dyn.u_r)
    b = (dyn.b_c, dyn.u_c, 0.0)
    if dyn.level == 0:
        return a, b
    z = dyn.zeta
    sum_a, sum_b = a, b
    for k in range(1, dyn.level + 1):
        new_a = (
            dyn.b_r + z * dyn.u_r * sum_b[0],
            z * dyn.u_r * sum_b[1],
            dyn.u_r * (1.0 + z * sum_b[2]),
        )
        new_b = (
            dyn.b_c + z * dyn.u_c * sum_a[0],
            dyn.u_c * (1.0 + z * sum_a[1]),
            z * dyn.u_c * sum_a[2],
        )
        if k == 1:
            sum_a, sum_b = new_a, new_b
        else:
            sum_a = tuple(s + n for s, n in zip(sum_a, new_a))
            sum_b = tuple(s + n for s, n in zip(sum_b, new_b))
        a, b = new_a, new_b
    return a, b


def _point(point) -> tuple[float, float]:
    if isinstance(point, MixedStrategyPair):
        return point.alpha, point.beta
    alpha, beta = point
    return float(alpha), float(beta)


def vector_field(dyn: Dynamics2x2, point) -> tuple[float, float]:
    """(dalpha/dt, dbeta/dt) of the level-``dyn.level`` dynamic at a point."""
    alpha, beta = _point(point)
    fa, fb = _affine_fields(dyn)
    return (
        fa[0] + fa[1] * alpha + fa[2] * beta,
        fb[0] + fb[1] * alpha + fb[2] * beta,
    )


def _orientation(dyn: Dynamics2x2) -> float:
    if not dyn.is_lyapunov_candidate:
        raise NotLyapunovCandidate(
            f"u_r*u_c = {dyn.u_r * dyn.u_c} >= 0: no quadratic Lyapunov function"
        )
    return 1.0 if dyn.u_c > 0 else -1.0


def lyapunov_value(dyn: Dynamics2x2, point) -> float:
    """F = 1/2 (u_c x^2 - u_r y^2) in deviations from the center.

    The sign is oriented so F >= 0: when u_c < 0 (and hence u_r > 0) both
    terms flip.
    """
    sign = _orientation(dyn)
    alpha, beta = _point(point)
    cen = center(dyn)
    x = alpha - cen.alpha
    y = beta - cen.beta
    return sign * 0.5 * (dyn.u_c * x * x - dyn.u_r * y * y)


def lyapunov_derivative_closed_form(dyn: Dynamics2x2, point, level: int | None = None) -> float:
    """dF/dt along the level-k field, levels 0..3 only.

    Level 0 is identically zero; levels 1 and 2 share the expression
    zeta*u_r*u_c*(u_c x^2 - u_r y^2); level 3 carries the extra factor
    (2 + zeta^2 u_r u_c). Oriented with the same sign as lyapunov_value.
    """
    sign = _orientation(dyn)
    k = dyn.level if level is None else level
    if k > 3:
        raise ValueError(f"no closed form kept for level {k}; use the numeric derivative")
    if k == 0:
        return 0.0
    alpha, beta = _point(point)
    cen = center(dyn)
    x = alpha - cen.alpha
    y = beta - cen.beta
    w = dyn.u_r * dyn.u_c
    quad = dyn.u_c * x * x - dyn.u_r * y * y
    if k in (1, 2):
        return sign * dyn.zeta * w * quad
    return sign * dyn.zeta * w * (2.0 + dyn.zeta**2 * w) * quad


def lyapunov_derivative_numeric(dyn: Dynamics2x2, point, level: int | None = None) -> float:
    """Chain-rule dF/dt = dF/dx * xdot + dF/dy * ydot, any level."""
    sign = _orientation(dyn)
    if level is not None and level != dyn.level:
        dyn = Dynamics2x2(dyn.u_r, dyn.b_r, dyn.u_c, dyn.b_c, dyn.zeta, level)
    alpha, beta = _point(point)
    cen = center(dyn)
    x = alpha - cen.alpha
    y = beta - cen.beta
    xdot, ydot = vector_field(dyn, point)
    return sign * (dyn.u_c * x * xdot - dyn.u_r * y * ydot)


def _rk4_affine(a0, aa, ab, b0, ba, bb, alpha, beta, dt, out):
    # One clamped RK4 step per row of out; written for numba and numpy alike.
    n = out.shape[0] - 1
    out[0, 0] = alpha
    out[0, 1] = beta
    for i in range(n):
        k1a = a0 + aa * alpha + ab * beta
        k1b = b0 + ba * alpha + bb * beta
        a2 = alpha + 0.5 * dt * k1a
        b2 = beta + 0.5 * dt * k1b
        k2a = a0 + aa * a2 + ab * b2
        k2b = b0 + ba * a2 + bb * b2
        a3 = alpha + 0.5 * dt * k2a
        b3 = beta + 0.5 * dt * k2b
        k3a = a0 + aa * a3 + ab * b3
        k3b = b0 + ba * a3 + bb * b3
        a4 = alpha + dt * k3a
        b4 = beta + dt * k3b
        k4a = a0 + aa * a4 + ab * b4
        k4b = b0 + ba * a4 + bb * b4
        alpha = alpha + dt * (k1a + 2.0 * k2a + 2.0 * k3a + k4a) / 6.0
        beta = beta + dt * (k1b + 2.0 * k2b + 2.0 * k3b + k4b) / 6.0
        if alpha < 0.0:
            alpha = 0.0
        elif alpha > 1.0:
            alpha = 1.0
        if beta < 0.0:
            beta = 0.0
        elif beta > 1.0:
            beta = 1.0
        out[i + 1, 0] = alpha
        out[i + 1, 1] = beta


_rk4_affine_fast = maybe_njit(_rk4_affine)


def integrate(dyn: Dynamics2x2, start, dt: float = 1e-3, horizon: float = 50.0) -> Trajectory:
    """Clamped fixed-step RK4 trajectory from ``start`` over ``horizon``.

    Lyapunov values ride along only when the mixed-equilibrium condition
    holds; other games get ``lyapunov_values=None``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    alpha, beta = _point(start)
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError(f"start {(alpha, beta)} outside the unit square")
    n_steps = max(1, int(round(horizon / dt)))
    fa, fb = _affine_fields(dyn)
    points = np.empty((n_steps + 1, 2))
    _rk4_affine_fast(fa[0], fa[1], fa[2], fb[0], fb[1], fb[2], alpha, beta, dt, points)
    if not np.isfinite(points).all():
        raise IntegrationDiverged("non-finite state during integration")
    times = np.arange(n_steps + 1) * dt
    lyap = None
    if dyn.is_lyapunov_candidate:
        cen = center(dyn)
        sign = _orientation(dyn)
        x = points[:, 0] - cen.alpha
        y = points[:, 1] - cen.beta
        lyap = sign * 0.5 * (dyn.u_c * x * x - dyn.u_r * y * y)
    return Trajectory(times=times, points=points, lyapunov_values=lyap)


def classify(
    trajectory: Trajectory,
    dyn: Dynamics2x2,
    epsilon: float = 1e-3,
    cycle_tolerance: float = 1e-3,
) -> ConvergenceReport:
    """Label a trajectory against the center of its dynamic.

    Precedence: converged (enters the epsilon ball and stays) beats
    cycling (Lyapunov value flat over the trailing half while distance
    stays clear of the ball) beats boundary attraction (endpoint on the
    unit-square edge). time_to_epsilon is the entry time of the final
    stay inside the ball.
    """
    if len(trajectory.points) == 0:
        raise ValueError("empty trajectory")
    cen = center(dyn)
    deltas = trajectory.points - np.array([cen.alpha, cen.beta])
    dist = np.hypot(deltas[:, 0], deltas[:, 1])
    final_distance = float(dist[-1])

    inside = dist <= epsilon
    if inside[-1]:
        outside_idx = np.flatnonzero(~inside)
        entry = 0 if outside_idx.size == 0 else int(outside_idx[-1]) + 1
        return ConvergenceReport(
            verdict=Verdict.CONVERGED_TO_CENTER,
            time_to_epsilon=float(trajectory.times[entry]),
            final_distance=final_distance,
        )

    if trajectory.lyapunov_values is not None:
        half = len(trajectory.points) // 2
        tail = trajectory.lyapunov_values[half:]
        scale = max(abs(float(tail[0])), 1e-300)
        flat = (tail.max() - tail.min()) / scale <= cycle_tolerance
        if flat and dist[half:].min() > epsilon:
            return ConvergenceReport(
                verdict=Verdict.CYCLING, time_to_epsilon=None, final_distance=final_distance
            )

    endpoint = trajectory.points[-1]
    on_edge = (
        endpoint[0] in (0.0, 1.0) or endpoint[1] in (0.0, 1.0)
    )
    if on_edge:
        return ConvergenceReport(
            verdict=Verdict.BOUNDARY_ATTRACTED, time_to_epsilon=None, final_distance=final_distance
        )
    return ConvergenceReport(
        verdict=Verdict.UNDETERMINED, time_to_epsilon=None, final_distance=final_distance
    )


def trajectory_to_csv(trajectory: Trajectory, path) -> None:
    """Write `t,alpha,beta[,lyapunov]` rows at 17 significant digits."""
    has_lyap = trajectory.lyapunov_values is not None
    with open(path, "w") as fh:
        fh.write("t,alpha,beta,lyapunov\n" if has_lyap else "t,alpha,beta\n")
        for i in range(len(trajectory.times)):
            row = [
                f"{trajectory.times[i]:.17g}",
                f"{trajectory.points[i, 0]:.17g}",
                f"{trajectory.points[i, 1]:.17g}",
            ]
            if has_lyap:
                row.append(f"{trajectory.lyapunov_values[i]:.17g}")
            fh.write(",".join(row) + "\n")
