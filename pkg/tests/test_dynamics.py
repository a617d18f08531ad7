"""Level-k fields, Lyapunov algebra, integration, and classification."""

import numpy as np
import pytest

from gr2 import dynamics, games
from gr2.dynamics import Dynamics2x2, Verdict


def rg_dyn(level=0, zeta=0.1):
    return Dynamics2x2.from_game(games.rotational_game(), zeta=zeta, level=level)


def random_candidate(rng, level=None, zeta=None):
    while True:
        u_r, u_c = rng.uniform(-3, 3, 2)
        if u_r * u_c < 0:
            break
    return Dynamics2x2(
        u_r=u_r,
        b_r=rng.uniform(-2, 2),
        u_c=u_c,
        b_c=rng.uniform(-2, 2),
        zeta=rng.uniform(1e-3, 0.5) if zeta is None else zeta,
        level=int(rng.integers(0, 4)) if level is None else level,
    )


# ------------------------------------------------------------- coefficients


def test_coefficients_rotational():
    assert dynamics.derive_coefficients(games.rotational_game()) == (-2.0, 1.0, 2.0, -1.0)


def test_coefficients_stag_hunt():
    assert dynamics.derive_coefficients(games.stag_hunt()) == (2.0, -1.0, 2.0, -1.0)


def test_coefficients_zero_game():
    zero = games.NormalFormGame(np.zeros((2, 2)), np.zeros((2, 2)))
    assert dynamics.derive_coefficients(zero) == (0.0, 0.0, 0.0, 0.0)


def test_coefficients_need_2x2():
    big = games.NormalFormGame(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        dynamics.derive_coefficients(big)


def test_center_rotational_and_stag_hunt():
    assert tuple(dynamics.center(rg_dyn())) == (0.5, 0.5)
    sh = Dynamics2x2.from_game(games.stag_hunt())
    assert tuple(dynamics.center(sh)) == (0.5, 0.5)
    assert dynamics.center(sh).interior


def test_center_zero_offsets():
    cen = dynamics.center(Dynamics2x2(u_r=-1, b_r=0, u_c=1, b_c=0))
    assert (cen.alpha, cen.beta) == (0.0, 0.0)
    assert not cen.interior


def test_center_degenerate():
    with pytest.raises(ValueError):
        dynamics.center(Dynamics2x2(u_r=0, b_r=1, u_c=1, b_c=0))


# ------------------------------------------------------------- vector field


def test_field_level0_at_center_is_zero():
    dyn = rg_dyn(level=0)
    assert dynamics.vector_field(dyn, dynamics.center(dyn)) == (0.0, 0.0)


def test_field_level0_example_point():
    got = dynamics.vector_field(rg_dyn(level=0), (0.6, 0.5))
    assert got == pytest.approx((0.0, 0.2), abs=1e-12)


def test_field_level1_formula():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dyn = random_candidate(rng, level=1)
        alpha, beta = rng.uniform(0, 1, 2)
        got = dynamics.vector_field(dyn, (alpha, beta))
        want_a = dyn.u_r * (beta + dyn.zeta * (dyn.u_c * alpha + dyn.b_c)) + dyn.b_r
        want_b = dyn.u_c * (alpha + dyn.zeta * (dyn.u_r * beta + dyn.b_r)) + dyn.b_c
        assert got == pytest.approx((want_a, want_b), rel=1e-12)


def test_field_zeta_zero_collapses_to_level0():
    rng = np.random.default_rng(9)
    for _ in range(100):
        base = random_candidate(rng, zeta=0.0)
        level0 = Dynamics2x2(base.u_r, base.b_r, base.u_c, base.b_c, 0.0, 0)
        point = rng.uniform(0, 1, 2)
        assert dynamics.vector_field(base, point) == dynamics.vector_field(level0, point)


def test_center_is_fixed_point_of_every_level():
    rng = np.random.default_rng(13)
    for _ in range(50):
        dyn = random_candidate(rng)
        cen = dynamics.center(dyn)
        vel = dynamics.vector_field(dyn, cen)
        assert vel == pytest.approx((0.0, 0.0), abs=1e-12)


# ---------------------------------------------------------------- Lyapunov


def test_lyapunov_value_examples():
    dyn = rg_dyn(level=1)
    assert dynamics.lyapunov_value(dyn, (0.5, 0.5)) == 0.0
    assert dynamics.lyapunov_value(dyn, (0.6, 0.5)) == pytest.approx(0.01, abs=1e-15)


def test_lyapunov_value_even_symmetry():
    rng = np.random.default_rng(21)
    for _ in range(50):
        dyn = random_candidate(rng)
        cen = dynamics.center(dyn)
        dx, dy = rng.uniform(-0.3, 0.3, 2)
        f_plus = dynamics.lyapunov_value(dyn, (cen.alpha + dx, cen.beta + dy))
        f_minus = dynamics.lyapunov_value(dyn, (cen.alpha - dx, cen.beta - dy))
        assert f_plus == pytest.approx(f_minus, rel=1e-12)
        assert f_plus >= 0.0


def test_lyapunov_orientation_flipped_game():
    """u_c < 0 and u_r > 0 flips the sign so F stays nonnegative."""
    dyn = Dynamics2x2(u_r=2, b_r=-1, u_c=-2, b_c=1, zeta=0.1, level=1)
    assert dynamics.lyapunov_value(dyn, (0.7, 0.6)) > 0.0
    cf = dynamics.lyapunov_derivative_closed_form(dyn, (0.7, 0.6))
    nm = dynamics.lyapunov_derivative_numeric(dyn, (0.7, 0.6))
    assert cf < 0.0
    assert nm == pytest.approx(cf, rel=1e-9)


def test_lyapunov_rejects_non_candidates():
    sh = Dynamics2x2.from_game(games.stag_hunt())
    with pytest.raises(dynamics.NotLyapunovCandidate):
        dynamics.lyapunov_value(sh, (0.4, 0.4))


def test_closed_form_level0_identically_zero():
    rng = np.random.default_rng(4)
    for _ in range(20):
        dyn = random_candidate(rng, level=0)
        assert dynamics.lyapunov_derivative_closed_form(dyn, rng.uniform(0, 1, 2)) == 0.0


def test_closed_form_level1_example():
    got = dynamics.lyapunov_derivative_closed_form(rg_dyn(level=1), (0.6, 0.5))
    assert got == pytest.approx(-0.008, abs=1e-15)


def test_closed_form_levels_1_and_2_coincide():
    rng = np.random.default_rng(17)
    for _ in range(50):
        dyn = random_candidate(rng)
        pt = rng.uniform(0, 1, 2)
        f1 = dynamics.lyapunov_derivative_closed_form(dyn, pt, level=1)
        f2 = dynamics.lyapunov_derivative_closed_form(dyn, pt, level=2)
        assert f1 == f2


def test_closed_form_level3_small_zeta():
    for zeta in (1e-3, 1e-5):
        dyn = Dynamics2x2(-2, 1, 2, -1, zeta=zeta, level=3)
        val = dynamics.lyapunov_derivative_closed_form(dyn, (0.6, 0.5))
        assert val < 0.0
        # leading factor is zeta * u_r*u_c * 2 * quad = zeta * (-4)*2*0.02
        assert val == pytest.approx(zeta * -0.16, rel=1e-4)


def test_closed_form_level_cap():
    dyn = rg_dyn(level=4)
    with pytest.raises(ValueError):
        dynamics.lyapunov_derivative_closed_form(dyn, (0.6, 0.5))
    # the numeric derivative still works above the closed-form cap
    assert dynamics.lyapunov_derivative_numeric(dyn, (0.6, 0.5)) < 0.0


def test_closed_vs_numeric_derivative_battery():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dyn = random_candidate(rng)
        pt = rng.uniform(0, 1, 2)
        cf = dynamics.lyapunov_derivative_closed_form(dyn, pt)
        nm = dynamics.lyapunov_derivative_numeric(dyn, pt)
        assert np.isclose(cf, nm, rtol=1e-9, atol=1e-12)


# -------------------------------------------------------------- integration


def test_integrate_stays_at_center():
    dyn = rg_dyn(level=2)
    traj = dynamics.integrate(dyn, (0.5, 0.5), dt=1e-3, horizon=1.0)
    assert np.all(traj.points == 0.5)


def test_integrate_level0_conserves_lyapunov():
    traj = dynamics.integrate(rg_dyn(level=0), (0.6, 0.5), dt=1e-3, horizon=50.0)
    f = traj.lyapunov_values
    assert np.abs(f - f[0]).max() / f[0] < 1e-5


def test_integrate_level2_converges_from_corner():
    dyn = rg_dyn(level=2)
    traj = dynamics.integrate(dyn, (0.9, 0.1), dt=1e-3, horizon=200.0)
    final = traj.points[-1]
    assert np.hypot(final[0] - 0.5, final[1] - 0.5) < 1e-3


def test_integrate_lyapunov_monotone_for_level1():
    """Away from clamping, F must never increase along a level-1..3 path."""
    for level in (1, 2, 3):
        dyn = rg_dyn(level=level)
        traj = dynamics.integrate(dyn, (0.7, 0.5), dt=1e-3, horizon=30.0)
        diffs = np.diff(traj.lyapunov_values)
        assert diffs.max() <= 1e-8


def test_integrate_non_candidate_has_no_lyapunov():
    sh = Dynamics2x2.from_game(games.stag_hunt(), level=0)
    traj = dynamics.integrate(sh, (0.9, 0.9), dt=1e-3, horizon=5.0)
    assert traj.lyapunov_values is None


def test_integrate_validation():
    with pytest.raises(ValueError):
        dynamics.integrate(rg_dyn(), (1.5, 0.5))
    with pytest.raises(ValueError):
        dynamics.integrate(rg_dyn(), (0.5, 0.5), dt=0.0)


def test_numba_and_python_paths_agree_exactly():
    from gr2.dynamics import _rk4_affine, _rk4_affine_fast

    if _rk4_affine_fast is _rk4_affine:
        pytest.skip("numba disabled; single path")
    args = (1.0, -0.4, -2.0, -1.0, 2.0, -0.08, 0.6, 0.5, 1e-3)
    out_py = np.empty((2001, 2))
    out_nb = np.empty((2001, 2))
    _rk4_affine(*args, out_py)
    _rk4_affine_fast(*args, out_nb)
    assert np.array_equal(out_py, out_nb)


# ------------------------------------------------------------ classification


def test_classify_level0_cycles():
    dyn = rg_dyn(level=0)
    traj = dynamics.integrate(dyn, (0.6, 0.5), dt=1e-3, horizon=50.0)
    report = dynamics.classify(traj, dyn)
    assert report.verdict is Verdict.CYCLING
    assert report.time_to_epsilon is None


def test_classify_levels_converge_and_order():
    entry_times = {}
    for level in (1, 2, 3):
        dyn = rg_dyn(level=level)
        traj = dynamics.integrate(dyn, (0.6, 0.5), dt=1e-3, horizon=50.0)
        report = dynamics.classify(traj, dyn)
        assert report.verdict is Verdict.CONVERGED_TO_CENTER
        entry_times[level] = report.time_to_epsilon
    assert entry_times[3] <= entry_times[2] <= entry_times[1]


def test_classify_constant_center_trajectory():
    dyn = rg_dyn(level=1)
    points = np.full((10, 2), 0.5)
    traj = dynamics.Trajectory(
        times=np.arange(10) * 1e-3, points=points, lyapunov_values=np.zeros(10)
    )
    report = dynamics.classify(traj, dyn)
    assert report.verdict is Verdict.CONVERGED_TO_CENTER
    assert report.time_to_epsilon == 0.0


def test_classify_boundary_attracted():
    sh = Dynamics2x2.from_game(games.stag_hunt(), level=0)
    traj = dynamics.integrate(sh, (0.9, 0.9), dt=1e-3, horizon=10.0)
    report = dynamics.classify(traj, sh)
    assert report.verdict is Verdict.BOUNDARY_ATTRACTED


def test_classify_undetermined_when_cut_short():
    dyn = rg_dyn(level=1)
    traj = dynamics.integrate(dyn, (0.6, 0.5), dt=1e-3, horizon=2.0)
    report = dynamics.classify(traj, dyn)
    assert report.verdict is Verdict.UNDETERMINED


def test_report_invariant():
    with pytest.raises(ValueError):
        dynamics.ConvergenceReport(Verdict.CYCLING, 1.0, 0.5)
    with pytest.raises(ValueError):
        dynamics.ConvergenceReport(Verdict.CONVERGED_TO_CENTER, None, 0.0)


# -------------------------------------------------------------------- export


def test_trajectory_csv_roundtrip(tmp_path):
    dyn = rg_dyn(level=1)
    traj = dynamics.integrate(dyn, (0.6, 0.5), dt=1e-3, horizon=0.01)
    path = tmp_path / "traj.csv"
    dynamics.trajectory_to_csv(traj, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,alpha,beta,lyapunov"
    assert len(lines) == len(traj.times) + 1
    for i, line in enumerate(lines[1:]):
        t, a, b, f = (float(tok) for tok in line.split(","))
        # 17 significant digits reproduce doubles exactly
        assert t == traj.times[i]
        assert a == traj.points[i, 0]
        assert b == traj.points[i, 1]
        assert f == traj.lyapunov_values[i]


def test_trajectory_csv_without_lyapunov(tmp_path):
    sh = Dynamics2x2.from_game(games.stag_hunt(), level=0)
    traj = dynamics.integrate(sh, (0.9, 0.9), dt=1e-3, horizon=0.01)
    path = tmp_path / "traj.csv"
    dynamics.trajectory_to_csv(traj, path)
    assert path.read_text().splitlines()[0] == "t,alpha,beta"


def test_trajectory_validation():
    with pytest.raises(ValueError):
        dynamics.Trajectory(np.zeros(3), np.zeros((2, 2)), None)
    with pytest.raises(ValueError):
        dynamics.Trajectory(np.zeros(1), np.array([[1.5, 0.0]]), None)
