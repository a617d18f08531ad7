"""Acceptance gate: one test per shipped guarantee.

The exact-math guarantees run in milliseconds; the training guarantees
are stochastic properties checked as medians over the six shipped seeds
and take the bulk of the wall time. Training goes through the CLI driver
so the checked artifacts are the same files a user's run would produce,
and the reproducibility test byte-compares a full repeat of the
Beauty Contest suite.
"""

import filecmp
import time

import numpy as np
import pytest

from gr2 import cli
from gr2.analysis import absorption_battery, exploitability, from_mixed_pair
from gr2.approx import Adam, MLPSpec
from gr2.dynamics import (
    Dynamics2x2,
    Verdict,
    center,
    classify,
    integrate,
    lyapunov_derivative_closed_form,
    lyapunov_derivative_numeric,
)
from gr2.games import MixedStrategyPair, rotational_game
from gr2.learning import opponent_model_grid_loss
from gr2.reasoning import poisson_weights

SEEDS = [0, 1, 2, 3, 4, 5]
SHRINKING = {"type": "beauty", "n": 2, "p": 0.7}
EXPANDING = {"type": "beauty", "n": 10, "p": 1.1}

# label -> (game, agent spec, trainer overrides); the trainer defaults in
# the CLI are the shipped recipes, so overrides stay empty here
BEAUTY_RUNS = {
    "L2": (SHRINKING, {"method": "gr2l", "level": 2}, {}),
    "L3": (SHRINKING, {"method": "gr2l", "level": 3}, {}),
    "L0": (SHRINKING, {"method": "indep"}, {}),
    "N10_L3": (EXPANDING, {"method": "gr2l", "level": 3}, {}),
    "L1": (SHRINKING, {"method": "gr2l", "level": 1}, {}),
}
THRESHOLD_RUNS = ("L2", "L3", "L0", "N10_L3")  # L1 only anchors the ordering


def _run_training(game, agent, trainer, out):
    raw = {"job": "train", "game": game, "agents": [agent], "seeds": SEEDS}
    if trainer:
        raw["trainer"] = trainer
    cfg = cli.parse_config(raw, out=str(out))
    rc = cli.run_train(cfg)
    assert rc == 0, f"training run failed, see {out}/summary.txt"
    return out


def _iteration_series(run_dir, seed):
    """Per-iteration (action, reward), each averaged over the agents."""
    data = np.loadtxt(run_dir / f"metrics_{seed}.csv", delimiter=",", skiprows=1)
    its = data[:, 0].astype(int)
    n = its.max() + 1
    actions = np.bincount(its, weights=data[:, 3]) / np.bincount(its)
    rewards = np.bincount(its, weights=data[:, 4]) / np.bincount(its)
    assert len(actions) == n
    return actions, rewards


def _final_guesses(run_dir):
    return np.array([_iteration_series(run_dir, s)[0][-1] for s in SEEDS])


def _reach_iteration(actions, threshold=1.0):
    """First iteration with the agent-mean guess below the threshold;
    a run that never gets there counts as one past the end."""
    hit = np.flatnonzero(actions < threshold)
    return int(hit[0]) if hit.size else len(actions) + 1


@pytest.fixture(scope="module")
def beauty_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("beauty")
    dirs = {}
    t0 = time.perf_counter()
    for name in THRESHOLD_RUNS:
        game, agent, trainer = BEAUTY_RUNS[name]
        dirs[name] = _run_training(game, agent, trainer, root / name)
    threshold_wall = time.perf_counter() - t0
    game, agent, trainer = BEAUTY_RUNS["L1"]
    dirs["L1"] = _run_training(game, agent, trainer, root / "L1")
    return {"dirs": dirs, "threshold_wall": threshold_wall}


@pytest.fixture(scope="module")
def noaux_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("noaux")
    return _run_training(SHRINKING, {"method": "gr2l", "level": 2},
                         {"auxiliary": False}, root / "L2_noaux")


@pytest.fixture(scope="module")
def stag_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("stag")
    t0 = time.perf_counter()
    dirs = {
        "L2": _run_training({"name": "stag_hunt"}, {"method": "gr2l", "level": 2},
                            {}, root / "L2"),
        "L0": _run_training({"name": "stag_hunt"}, {"method": "indep"},
                            {}, root / "L0"),
    }
    return {"dirs": dirs, "wall": time.perf_counter() - t0}


# --------------------------------------------------------------- exact math


def test_closed_form_lyapunov_derivative_matches_chain_rule_in_bulk():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        dyn = Dynamics2x2(
            u_r=sign * rng.uniform(0.1, 4.0),
            b_r=rng.uniform(-3.0, 3.0),
            u_c=-sign * rng.uniform(0.1, 4.0),
            b_c=rng.uniform(-3.0, 3.0),
            zeta=rng.uniform(0.02, 0.3),
            level=int(rng.integers(0, 4)),
        )
        point = rng.uniform(0.0, 1.0, 2)
        cf = lyapunov_derivative_closed_form(dyn, point)
        num = lyapunov_derivative_numeric(dyn, point)
        bound = 1e-9 * max(1.0, abs(num))
        assert abs(cf - num) <= bound, f"{cf} vs {num} at {dyn}"
        worst = max(worst, abs(cf - num) / max(1.0, abs(num)))
    elapsed = time.perf_counter() - t0
    print(f"1000 samples, worst relative error {worst:.2e}, {elapsed:.2f}s")
    assert elapsed < 5.0


def test_rotational_game_cycles_at_level_zero_and_converges_at_higher_levels():
    t0 = time.perf_counter()
    game = rotational_game()
    dyn0 = Dynamics2x2.from_game(game, zeta=0.1, level=0)
    tr0 = integrate(dyn0, (0.2, 0.8), horizon=50.0)
    F = tr0.lyapunov_values
    drift = (F.max() - F.min()) / abs(F[0])
    assert drift <= 1e-5, f"level-0 orbit should conserve F, drift {drift:.2e}"
    assert classify(tr0, dyn0).verdict is Verdict.CYCLING

    t_eps = {}
    for level in (1, 2, 3):
        dyn = Dynamics2x2.from_game(game, zeta=0.1, level=level)
        report = classify(integrate(dyn, (0.2, 0.8), horizon=50.0), dyn, epsilon=1e-3)
        assert report.verdict is Verdict.CONVERGED_TO_CENTER
        assert report.final_distance < 1e-3
        t_eps[level] = report.time_to_epsilon
    assert t_eps[3] <= t_eps[2] <= t_eps[1], t_eps
    elapsed = time.perf_counter() - t0
    print(f"F drift {drift:.2e}; convergence times {t_eps}; {elapsed:.2f}s")
    assert elapsed < 30.0


def test_rotational_game_center_is_the_mixed_equilibrium():
    game = rotational_game()
    cen = center(Dynamics2x2.from_game(game))
    assert (cen.alpha, cen.beta) == (0.5, 0.5)
    gap = exploitability(game, from_mixed_pair(MixedStrategyPair(cen.alpha, cen.beta)))
    print(f"center ({cen.alpha}, {cen.beta}), exploitability {gap:.2e}")
    assert gap <= 1e-12


def test_grid_opponent_model_reaches_the_softmax_posterior():
    rng = np.random.default_rng(7)
    spec = MLPSpec(2, (10, 10), 5)
    phi = spec.init(rng)
    states = rng.uniform(-1.0, 1.0, (8, 2))
    q_rows = rng.normal(0.0, 1.0, (8, 5))  # frozen targets
    opt = Adam(phi.size, 1e-2)
    t0 = time.perf_counter()
    kl = np.inf
    steps = 0
    for steps in range(1, 2001):
        kl, grad = opponent_model_grid_loss(spec, phi, states, q_rows)
        if kl <= 1e-3:
            break
        opt.step(phi, grad)
    elapsed = time.perf_counter() - t0
    print(f"KL {kl:.2e} after {steps} steps, {elapsed:.2f}s")
    assert kl <= 1e-3, f"KL still {kl:.2e} after {steps} steps"
    assert elapsed < 10.0


def test_poisson_level_weights_match_closed_form_and_ratio_identity():
    w = poisson_weights(1.5, 2)
    assert np.allclose(w, (0.275862, 0.413793, 0.310345), rtol=0.0, atol=1e-6)
    for lam in (0.5, 1.5, 5.0):
        for k in range(1, 7):
            weights = poisson_weights(lam, k)
            for m in range(1, k + 1):
                assert abs(weights[m] / weights[m - 1] - lam / m) <= 1e-12
    print(f"weights(1.5, 2) = {tuple(round(float(v), 6) for v in w)}")


def test_every_training_loss_passes_finite_difference_checks():
    t0 = time.perf_counter()
    items = []
    for seed in (0, 1, 2):
        cli._verify_gradients(items, seed=seed)
    elapsed = time.perf_counter() - t0
    bad = [(name, detail) for name, ok, detail in items if not ok]
    assert not bad, bad
    print(f"{len(items)} loss/bundle checks passed, {elapsed:.2f}s")
    assert elapsed < 30.0


def test_higher_levels_repeat_a_reached_pure_nash_across_random_games():
    t0 = time.perf_counter()
    report = absorption_battery(seed=0, count=200, k_max=8)
    elapsed = time.perf_counter() - t0
    assert report.count == 200
    assert report.holds, report.failures[:5]
    print(f"{report.reached_nash}/200 chains reached a pure Nash; all stayed; {elapsed:.2f}s")
    assert elapsed < 10.0


# ---------------------------------------------------------------- training


def test_beauty_contest_median_final_guesses_meet_thresholds(beauty_runs):
    dirs = beauty_runs["dirs"]
    med = {name: float(np.median(_final_guesses(dirs[name]))) for name in dirs}
    thresholds = [
        ("two-player shrinking, level 2", med["L2"] < 1.0, f"median {med['L2']:.3f} (want < 1.0)"),
        ("two-player shrinking, level 3", med["L3"] < 1.0, f"median {med['L3']:.3f} (want < 1.0)"),
        ("two-player shrinking, level 0", med["L0"] > 5.0, f"median {med['L0']:.3f} (want > 5.0)"),
        ("ten-player expanding, level 3", med["N10_L3"] > 90.0, f"median {med['N10_L3']:.3f} (want > 90.0)"),
    ]
    for name, ok, detail in thresholds:
        print(f"{'MET ' if ok else 'MISS'} {name}: {detail}")
    misses = [name for name, ok, _ in thresholds if not ok]
    if misses:
        # a missed threshold is tolerated only while more reasoning still
        # lands closer to equilibrium (guesses shrink toward 0 here)
        ordered = med["L3"] <= med["L1"] <= med["L0"]
        print(f"fallback ordering L3 {med['L3']:.3f} <= L1 {med['L1']:.3f} "
              f"<= L0 {med['L0']:.3f}: {'holds' if ordered else 'VIOLATED'}")
        assert ordered, (
            f"missed {misses} and the level ordering broke: "
            f"L3 {med['L3']:.3f}, L1 {med['L1']:.3f}, L0 {med['L0']:.3f}"
        )
    wall = beauty_runs["threshold_wall"]
    print(f"threshold suite wall {wall / 60:.1f} min")
    assert wall < 1200.0, f"suite took {wall:.0f}s"


def test_stag_hunt_level_two_cooperates_and_beats_the_baseline(stag_runs):
    dirs = stag_runs["dirs"]
    joint = {
        name: np.array([_iteration_series(dirs[name], s)[1][-1] for s in SEEDS])
        for name in dirs
    }
    cooperating = int((joint["L2"] >= 3.5).sum())
    print(f"level-2 final joint rewards {np.round(joint['L2'], 3).tolist()}; "
          f"{cooperating}/6 at or above 3.5")
    assert cooperating >= 4
    med_l2 = float(np.median(joint["L2"]))
    med_l0 = float(np.median(joint["L0"]))
    print(f"median joint reward: level 2 {med_l2:.3f} vs level 0 {med_l0:.3f}")
    assert med_l0 < med_l2
    print(f"wall {stag_runs['wall'] / 60:.1f} min")
    assert stag_runs["wall"] < 600.0


def test_auxiliary_loss_reaches_low_guesses_at_least_as_fast(beauty_runs, noaux_run):
    with_aux = [
        _reach_iteration(_iteration_series(beauty_runs["dirs"]["L2"], s)[0]) for s in SEEDS
    ]
    without = [_reach_iteration(_iteration_series(noaux_run, s)[0]) for s in SEEDS]
    med_aux = float(np.median(with_aux))
    med_plain = float(np.median(without))
    print(f"iterations to guess < 1.0: with auxiliary {with_aux} (median {med_aux}), "
          f"without {without} (median {med_plain})")
    assert med_aux <= med_plain


def test_identical_seeds_reproduce_metric_files_byte_for_byte(beauty_runs, tmp_path_factory):
    root = tmp_path_factory.mktemp("beauty_repeat")
    compared = 0
    for name, (game, agent, trainer) in BEAUTY_RUNS.items():
        repeat = _run_training(game, agent, trainer, root / name)
        first = beauty_runs["dirs"][name]
        for fname in [f"metrics_{s}.csv" for s in SEEDS] + ["aggregate.csv"]:
            assert filecmp.cmp(first / fname, repeat / fname, shallow=False), (
                f"{name}/{fname} differs between identical runs"
            )
            compared += 1
    print(f"{compared} files byte-identical across repeated runs")
