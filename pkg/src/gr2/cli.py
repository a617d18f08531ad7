"""Reproducible experiment driver.

Four job kinds share one JSON config format: ``dynamics`` integrates the
level-k gradient fields of a 2x2 game from a grid of starts, ``train``
runs self-play training across seeds, ``tournament`` cross-plays every
ordered pair of agent specs, and ``verify`` executes the package's own
oracle checks. Every run writes plot-ready CSV plus a human summary, and
all randomness flows from the named seeds, so identical configs produce
byte-identical metric files.

Exit codes: 0 success, 1 job failure (more than half the seeds aborted,
or any verification item failed), 2 config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import learning
from .analysis import absorption_battery
from .dynamics import Dynamics2x2, center, classify, integrate, lyapunov_derivative_closed_form, lyapunov_derivative_numeric, trajectory_to_csv
from .games import BeautyContestEnv, MatrixSelfPlayEnv, NormalFormGame, game_from_dict
from .reasoning import JointQView, opponent_posterior, poisson_weights, soft_max_operator


class ConfigError(ValueError):
    """Anything wrong with the experiment description itself."""


JOBS = ("dynamics", "train", "tournament", "verify")
METHODS = ("indep", "gr2l", "gr2m")

# Trainer settings that reproduce the shipped experiments; a config's
# "trainer" table overrides any of them.
BEAUTY_TRAINER_DEFAULTS = {
    "iterations": 400,
    "steps_per_iteration": 10,
    "updates_per_step": 2,
    "reward_scale": 0.5,
    "temperature_start": 0.1,
    "temperature_end": 0.003,
}
MATRIX_TRAINER_DEFAULTS = {
    "iterations": 200,
    "steps_per_iteration": 25,
    "updates_per_step": 3,
    "reward_scale": 0.5,
    "temperature_start": 0.1,
    "temperature_end": 0.003,
}


@dataclasses.dataclass(frozen=True)
class AgentSpec:
    method: str
    level: int = 0
    lambda_mean: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"agent method must be one of {METHODS}, got {self.method!r}")
        if self.method == "indep" and self.level != 0:
            raise ConfigError("the independent baseline is level 0")
        if self.method != "indep" and self.level < 1:
            raise ConfigError(f"{self.method} needs level >= 1")
        if self.method == "gr2m" and self.lambda_mean is None:
            raise ConfigError("gr2m needs a lambda value")

    @property
    def label(self) -> str:
        if self.method == "indep":
            return "indep"
        if self.method == "gr2m":
            return f"gr2m{self.level}_lam{self.lambda_mean}"
        return f"gr2l{self.level}"


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    job: str
    game: dict | None
    agents: tuple[AgentSpec, ...]
    trainer: dict
    seeds: tuple[int, ...]
    out: str
    # dynamics settings
    levels: tuple[int, ...] = (0, 1, 2, 3)
    starts: tuple[tuple[float, float], ...] = ()
    zeta: float = 0.1
    dt: float = 1e-3
    horizon: float = 50.0
    epsilon: float = 1e-3
    # verify settings
    k_max: int = 8
    battery_count: int = 200
    battery_seed: int = 0

    def canonical(self) -> dict:
        """Semantically meaningful fields only (the output dir is plumbing)."""
        return {
            "job": self.job,
            "game": self.game,
            "agents": [dataclasses.asdict(a) for a in self.agents],
            "trainer": self.trainer,
            "seeds": list(self.seeds),
            "levels": list(self.levels),
            "starts": [list(s) for s in self.starts],
            "zeta": self.zeta,
            "dt": self.dt,
            "horizon": self.horizon,
            "epsilon": self.epsilon,
            "k_max": self.k_max,
            "battery_count": self.battery_count,
            "battery_seed": self.battery_seed,
        }


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(raw: dict, job: str | None = None, out: str | None = None,
                 seeds: tuple[int, ...] | None = None) -> ExperimentConfig:
    """Validate a config mapping; CLI flags override file fields."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a mapping, got {type(raw).__name__}")
    known = {
        "job", "game", "agents", "trainer", "seeds", "out", "levels", "starts",
        "zeta", "dt", "horizon", "epsilon", "k_max", "battery_count", "battery_seed",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    job = job or raw.get("job")
    if job not in JOBS:
        raise ConfigError(f"job must be one of {JOBS}, got {job!r}")

    game = raw.get("game")
    if isinstance(game, str):
        try:
            with open(game) as fh:
                game = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"game file not found: {game}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"game file is not valid JSON: {err}")
    if game is not None and not isinstance(game, dict):
        raise ConfigError("game must be an inline mapping or a file path")

    agents_raw = raw.get("agents", [{"method": "gr2l", "level": 2}])
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError("agents must be a nonempty list")
    agents = []
    for spec in agents_raw:
        if not isinstance(spec, dict):
            raise ConfigError(f"agent spec must be a mapping, got {spec!r}")
        extra = set(spec) - {"method", "level", "lambda"}
        if extra:
            raise ConfigError(f"unknown agent spec keys: {sorted(extra)}")
        agents.append(AgentSpec(
            method=spec.get("method", "gr2l"),
            level=int(spec.get("level", 0 if spec.get("method") == "indep" else 2)),
            lambda_mean=float(spec["lambda"]) if "lambda" in spec else None,
        ))

    seeds = tuple(seeds if seeds is not None else raw.get("seeds", (0, 1, 2, 3, 4, 5)))
    if not seeds:
        raise ConfigError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds: {seeds}")

    trainer = dict(raw.get("trainer", {}))
    starts = raw.get("starts")
    if starts is None:
        grid = (0.2, 0.5, 0.8)
        starts = tuple((a, b) for a in grid for b in grid)
    else:
        starts = tuple((float(a), float(b)) for a, b in starts)

    try:
        return ExperimentConfig(
            job=job,
            game=game,
            agents=tuple(agents),
            trainer=trainer,
            seeds=tuple(int(s) for s in seeds),
            out=out or raw.get("out", "runs"),
            levels=tuple(int(v) for v in raw.get("levels", (0, 1, 2, 3))),
            starts=starts,
            zeta=float(raw.get("zeta", 0.1)),
            dt=float(raw.get("dt", 1e-3)),
            horizon=float(raw.get("horizon", 50.0)),
            epsilon=float(raw.get("epsilon", 1e-3)),
            k_max=int(raw.get("k_max", 8)),
            battery_count=int(raw.get("battery_count", 200)),
            battery_seed=int(raw.get("battery_seed", 0)),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err))


def _build_game(cfg: ExperimentConfig):
    if cfg.game is None:
        raise ConfigError(f"the {cfg.job} job needs a game")
    try:
        return game_from_dict(cfg.game)
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad game spec: {err}")


def _fmt(value) -> str:
    """Shortest round-trip float text; deterministic across runs."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ------------------------------------------------------------------ dynamics


def run_dynamics(cfg: ExperimentConfig) -> int:
    game = _build_game(cfg)
    if not isinstance(game, NormalFormGame) or not game.is_2x2:
        raise ConfigError("dynamics needs a 2x2 matrix game")
    os.makedirs(cfg.out, exist_ok=True)
    summary_rows = []
    for level in cfg.levels:
        for idx, start in enumerate(cfg.starts):
            name = f"trajectory_L{level}_s{idx}.csv"
            try:
                dyn = Dynamics2x2.from_game(game, zeta=cfg.zeta, level=level)
                traj = integrate(dyn, start, dt=cfg.dt, horizon=cfg.horizon)
                report = classify(traj, dyn, epsilon=cfg.epsilon)
                trajectory_to_csv(traj, os.path.join(cfg.out, name))
                summary_rows.append((
                    level, start[0], start[1], report.verdict.value,
                    report.time_to_epsilon if report.time_to_epsilon is not None else "",
                    report.final_distance, name,
                ))
            except (ValueError, ZeroDivisionError, FloatingPointError) as err:
                summary_rows.append((level, start[0], start[1], f"skipped ({err})", "", "", ""))
    _write_csv(
        os.path.join(cfg.out, "dynamics_summary.csv"),
        ["level", "start_alpha", "start_beta", "verdict", "time_to_epsilon", "final_distance", "csv"],
        summary_rows,
    )
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write(f"job: dynamics\nconfig_hash: {config_hash(cfg)}\n")
        dyn0 = Dynamics2x2.from_game(game, zeta=cfg.zeta)
        fh.write(f"coefficients: u_r={dyn0.u_r} b_r={dyn0.b_r} u_c={dyn0.u_c} b_c={dyn0.b_c}\n")
        if dyn0.is_lyapunov_candidate:
            cen = center(dyn0)
            fh.write(f"center: ({cen.alpha}, {cen.beta}) interior={cen.interior}\n")
        for row in summary_rows:
            fh.write(f"level {row[0]} start ({row[1]}, {row[2]}): {row[3]}"
                     + (f" t_eps={row[4]}" if row[4] != "" else "") + "\n")
    return 0


# -------------------------------------------------------------------- train


def _trainer_config(cfg: ExperimentConfig, spec: AgentSpec, env) -> learning.TrainerConfig:
    defaults = dict(BEAUTY_TRAINER_DEFAULTS if isinstance(env, BeautyContestEnv)
                    else MATRIX_TRAINER_DEFAULTS)
    defaults.update(cfg.trainer)
    defaults.pop("level", None)
    defaults.pop("independent", None)
    defaults.pop("mixture", None)
    try:
        return learning.TrainerConfig(
            level=spec.level,
            independent=spec.method == "indep",
            mixture=spec.method == "gr2m",
            lambda_mean=spec.lambda_mean if spec.lambda_mean is not None else 1.5,
            **defaults,
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad trainer settings: {err}")


def _make_env(game, steps_per_iteration: int):
    if isinstance(game, BeautyContestEnv):
        return dataclasses.replace(game, steps_per_iteration=steps_per_iteration)
    return MatrixSelfPlayEnv(game, steps_per_iteration=steps_per_iteration)


def _final_score(env, record: learning.RunRecord) -> float:
    """The summary scalar: the converged guess for the Beauty Contest, the
    final per-step reward averaged over agents for matrix games."""
    if isinstance(env, BeautyContestEnv):
        return float(np.mean(record.final_mean_actions))
    last_it = record.metrics[-1]["iteration"]
    rewards = [m["mean_reward"] for m in record.metrics if m["iteration"] == last_it]
    return float(np.mean(rewards))


def _train_one_seed(payload: dict):
    """Worker for one (specs, seed) run; returns plain picklable data."""
    cfg = payload["cfg"]
    specs = payload["specs"]
    seed = payload["seed"]
    game = _build_game(cfg)
    t0 = time.time()
    try:
        base = _trainer_config(cfg, specs[0], game)
        env = _make_env(game, base.steps_per_iteration)
        if len(specs) == 1:
            specs = tuple([specs[0]] * env.n_agents)
        elif len(specs) != env.n_agents:
            raise ConfigError(f"need 1 or {env.n_agents} agent specs, got {len(specs)}")
        configs = [_trainer_config(cfg, s, game) for s in specs]
        obs_dim = learning.observation_dim(env)
        agents = [
            learning.make_agent(c, obs_dim, env.low, env.high, seed=[seed, i])
            for i, c in enumerate(configs)
        ]
        # one shared loop: agents may differ in method, so each uses its own
        # config for acting and updating
        record = _train_mixed(env, agents, configs)
        score = _final_score(env, record)
        return {
            "seed": seed, "metrics": record.metrics, "score": score,
            "final_actions": [float(a) for a in record.final_mean_actions],
            "error": None, "duration": time.time() - t0,
        }
    except ConfigError:
        raise
    except Exception as err:  # noqa: BLE001 - a failed seed must not sink the others
        return {"seed": seed, "metrics": [], "score": math.nan,
                "final_actions": [], "error": f"{type(err).__name__}: {err}",
                "duration": time.time() - t0}


def _train_mixed(env, agents, configs) -> learning.RunRecord:
    """learning.train generalized to per-agent configs (cross-play).

    The loop schedule (iterations, steps, warmup, episode shape) follows
    configs[0]; per-agent settings govern acting and updating. Identical
    configs defer to learning.train so self-play output stays byte-equal.
    """
    if all(c == configs[0] for c in configs[1:]):
        return learning.train(env, agents, configs[0])
    n = env.n_agents
    lead = configs[0]
    obs = learning.initial_observations(env)
    metrics = []
    global_step = 0
    final_means = np.zeros(n)
    for it in range(lead.iterations):
        act_sums = np.zeros(n)
        rew_sums = np.zeros(n)
        loss_lists = [([], [], [], []) for _ in range(n)]
        for step in range(lead.steps_per_iteration):
            a_norm = np.zeros(n)
            for i, agent in enumerate(agents):
                a_norm[i], _ = learning.act(agent, obs[i], configs[i], explore=True)
                agent.env_steps += 1
            raw = learning.denormalize(a_norm, env.low, env.high)
            rewards = env.step(raw)
            done = True if lead.round_terminal else step == lead.steps_per_iteration - 1
            nxt = learning.next_observations(env, raw)
            for i, agent in enumerate(agents):
                agent.replay.push(obs[i], a_norm[i],
                                  learning.opponent_signal(env, raw, i),
                                  configs[i].reward_scale * rewards[i], nxt[i], done)
            global_step += 1
            do_update = (len(agents[0].replay) >= lead.warmup
                         and global_step % lead.update_every == 0)
            for i, agent in enumerate(agents):
                if do_update:
                    for _ in range(configs[i].updates_per_step):
                        l_q, l_pi, l_rho, l_aux, _ = learning._update_agent(
                            agent, configs[i], configs[i].temperature(it))
                        loss_lists[i][0].append(l_q)
                        loss_lists[i][1].append(l_pi)
                        loss_lists[i][2].append(l_rho)
                        loss_lists[i][3].append(l_aux)
                learning.target_update(agent, configs[i])
            act_sums += raw
            rew_sums += np.asarray(rewards)
            obs = nxt if (lead.round_terminal or not done) else learning.initial_observations(env)
        for i in range(n):
            ls = loss_lists[i]
            metrics.append({
                "iteration": it, "step": global_step, "agent": i,
                "mean_action": act_sums[i] / lead.steps_per_iteration,
                "mean_reward": rew_sums[i] / lead.steps_per_iteration,
                "loss_q": float(np.mean(ls[0])) if ls[0] else math.nan,
                "loss_pi": float(np.mean(ls[1])) if ls[1] else math.nan,
                "loss_rho": float(np.mean(ls[2])) if ls[2] else math.nan,
                "loss_aux": float(np.mean(ls[3])) if ls[3] else math.nan,
            })
        final_means = act_sums / lead.steps_per_iteration
    return learning.RunRecord(metrics=metrics, final_mean_actions=final_means,
                              gap_history=[], config=configs[0])


METRIC_COLUMNS = ["iteration", "step", "agent", "mean_action", "mean_reward",
                  "loss_q", "loss_pi", "loss_rho", "loss_aux"]


def _run_seeds(cfg: ExperimentConfig, specs: tuple[AgentSpec, ...]):
    """All seeds of one pairing, concurrently when cores allow."""
    payloads = [{"cfg": cfg, "specs": specs, "seed": s} for s in cfg.seeds]
    workers = min(len(payloads), os.cpu_count() or 1,
                  int(os.environ.get("GR2_MAX_WORKERS", "64")))
    if workers <= 1:
        results = [_train_one_seed(p) for p in payloads]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one_seed, payloads))
    return sorted(results, key=lambda r: r["seed"])


def _aggregate_rows(results) -> list[tuple]:
    """Per-iteration median and interquartile range across seeds of the
    agent-averaged action and reward."""
    per_seed = {}
    for res in results:
        if res["error"]:
            continue
        by_it = {}
        for m in res["metrics"]:
            by_it.setdefault(m["iteration"], []).append(m)
        per_seed[res["seed"]] = {
            it: (float(np.mean([m["mean_action"] for m in ms])),
                 float(np.mean([m["mean_reward"] for m in ms])))
            for it, ms in by_it.items()
        }
    if not per_seed:
        return []
    iterations = sorted(next(iter(per_seed.values())))
    rows = []
    for it in iterations:
        acts = np.array([per_seed[s][it][0] for s in sorted(per_seed)])
        rews = np.array([per_seed[s][it][1] for s in sorted(per_seed)])
        rows.append((
            it,
            float(np.median(acts)),
            float(np.percentile(acts, 75) - np.percentile(acts, 25)),
            float(np.median(rews)),
            float(np.percentile(rews, 75) - np.percentile(rews, 25)),
        ))
    return rows


def run_train(cfg: ExperimentConfig) -> int:
    if len(cfg.agents) != 1:
        raise ConfigError("train runs one agent spec in self-play; use tournament for pairings")
    os.makedirs(cfg.out, exist_ok=True)
    results = _run_seeds(cfg, cfg.agents)
    for res in results:
        if res["error"]:
            continue
        _write_csv(
            os.path.join(cfg.out, f"metrics_{res['seed']}.csv"),
            METRIC_COLUMNS,
            ([m[c] for c in METRIC_COLUMNS] for m in res["metrics"]),
        )
    _write_csv(
        os.path.join(cfg.out, "aggregate.csv"),
        ["iteration", "median_mean_action", "iqr_mean_action", "median_mean_reward", "iqr_mean_reward"],
        _aggregate_rows(results),
    )
    ok = [r for r in results if not r["error"]]
    failed = [r for r in results if r["error"]]
    scores = [r["score"] for r in ok]
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write(f"job: train\nconfig_hash: {config_hash(cfg)}\n")
        fh.write(f"agents: {cfg.agents[0].label} self-play\n")
        for res in results:
            line = (f"seed {res['seed']}: FAILED {res['error']}" if res["error"]
                    else f"seed {res['seed']}: final score {_fmt(res['score'])}")
            fh.write(line + f" ({res['duration']:.1f}s)\n")
        if scores:
            fh.write(f"median final score: {_fmt(float(np.median(scores)))}\n")
        fh.write(f"failed seeds: {len(failed)}/{len(results)}\n")
    return 1 if len(failed) * 2 > len(results) else 0


# --------------------------------------------------------------- tournament


def run_tournament(cfg: ExperimentConfig) -> int:
    if not cfg.agents:
        raise ConfigError("tournament needs at least one agent spec")
    game = _build_game(cfg)
    probe_env = _make_env(game, 1)
    if probe_env.n_agents != 2:
        raise ConfigError("tournament cross-play needs a 2-player game")
    os.makedirs(cfg.out, exist_ok=True)
    labels = [s.label for s in cfg.agents]
    if len(set(labels)) != len(labels):
        raise ConfigError("agent specs must be distinct in a tournament")
    n = len(cfg.agents)
    raw = np.zeros((n, n))
    failures = 0
    total = 0
    for i, spec_a in enumerate(cfg.agents):
        for j, spec_b in enumerate(cfg.agents):
            pairing = (spec_a,) if i == j else (spec_a, spec_b)
            results = _run_seeds(cfg, pairing)
            scores = []
            for res in results:
                total += 1
                if res["error"]:
                    failures += 1
                elif i == j:
                    # self-play: the same scalar the train job reports
                    scores.append(res["score"])
                else:
                    # the row method's own outcome in this pairing
                    if isinstance(probe_env, BeautyContestEnv):
                        scores.append(res["final_actions"][0])
                    else:
                        own = [m["mean_reward"] for m in res["metrics"]
                               if m["agent"] == 0 and m["iteration"] == res["metrics"][-1]["iteration"]]
                        scores.append(float(np.mean(own)))
            raw[i, j] = float(np.median(scores)) if scores else math.nan
    # best method gets 1 and worst 0 within each column; for the Beauty
    # Contest lower guesses are better, so the scale flips
    norm = np.zeros_like(raw)
    lower_better = isinstance(probe_env, BeautyContestEnv)
    for j in range(n):
        col = raw[:, j]
        lo, hi = np.nanmin(col), np.nanmax(col)
        if not np.isfinite(lo) or hi == lo:
            norm[:, j] = 1.0
        else:
            scaled = (col - lo) / (hi - lo)
            norm[:, j] = 1.0 - scaled if lower_better else scaled
    _write_csv(os.path.join(cfg.out, "tournament.csv"),
               ["method"] + labels, ((labels[i], *raw[i]) for i in range(n)))
    _write_csv(os.path.join(cfg.out, "tournament_normalized.csv"),
               ["method"] + labels + ["average"],
               ((labels[i], *norm[i], float(norm[i].mean())) for i in range(n)))
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write(f"job: tournament\nconfig_hash: {config_hash(cfg)}\n")
        order = np.argsort(-norm.mean(axis=1))
        for i in order:
            fh.write(f"{labels[i]}: normalized average {_fmt(float(norm[i].mean()))}\n")
        fh.write(f"failed runs: {failures}/{total}\n")
    return 1 if failures * 2 > total else 0


# ------------------------------------------------------------------- verify


def _fd_gradient_ok(loss_fn, vec: np.ndarray, grad: np.ndarray, rng, n_coords: int = 5,
                    h: float = 1e-6, rtol: float = 1e-4, atol: float = 1e-8) -> tuple[bool, float]:
    if not np.linalg.norm(grad) > 0.0:
        return False, math.inf
    worst = 0.0
    # the largest entries catch sign errors, the random ones dead paths
    top = np.argsort(np.abs(grad))[-2:]
    coords = list(top) + list(rng.choice(vec.size, size=min(n_coords, vec.size), replace=False))
    for c in coords:
        keep = vec[c]
        vec[c] = keep + h
        up = loss_fn()
        vec[c] = keep - h
        down = loss_fn()
        vec[c] = keep
        fd = (up - down) / (2.0 * h)
        err = abs(fd - grad[c])
        worst = max(worst, err)
        if err > atol + rtol * max(abs(fd), abs(grad[c])):
            return False, err
    return True, worst


def _verify_gradients(items: list, seed: int = 0) -> None:
    cfg = learning.TrainerConfig(level=3, warmup=8, batch_size=8)
    agent = learning.make_agent(cfg, 1, 0.0, 100.0, seed=seed)
    rng = np.random.default_rng(seed + 1)
    B = 8
    batch = learning.Batch(
        obs=rng.uniform(-1, 1, (B, 1)),
        action=rng.uniform(-0.9, 0.9, (B, 1)),
        opp_action=rng.uniform(-0.9, 0.9, (B, 1)),
        reward=rng.normal(size=(B, 1)),
        next_obs=rng.uniform(-1, 1, (B, 1)),
        done=(rng.uniform(size=(B, 1)) < 0.3).astype(float),
    )
    noise_c = learning._critic_noise(agent, cfg, B)
    _, g = learning.critic_loss(agent, batch, cfg, noise=noise_c, temperature=0.1)
    ok, err = _fd_gradient_ok(
        lambda: learning.critic_loss(agent, batch, cfg, noise=noise_c, temperature=0.1)[0],
        agent.omega["joint"], g["joint"], rng)
    items.append(("gradient: critic joint Q", ok, f"worst abs err {err:.2e}"))
    noise_r = {"eps": rng.standard_normal((B, cfg.opp_samples))}
    _, g = learning.opponent_model_loss(agent, batch, cfg, noise=noise_r)
    ok, err = _fd_gradient_ok(
        lambda: learning.opponent_model_loss(agent, batch, cfg, noise=noise_r)[0],
        agent.phi, g["phi"], rng)
    items.append(("gradient: opponent model", ok, f"worst abs err {err:.2e}"))
    noise_a = {"eps_top": rng.standard_normal((B, 1))}
    _, g = learning.actor_loss(agent, batch, cfg, noise=noise_a, temperature=0.1)
    ok, err = _fd_gradient_ok(
        lambda: learning.actor_loss(agent, batch, cfg, noise=noise_a, temperature=0.1)[0],
        agent.theta["odd"], g["odd"], rng)
    items.append(("gradient: policy", ok, f"worst abs err {err:.2e}"))
    ladder = learning.level_ladder(agent, batch.obs, cfg.level)
    _, g = learning.auxiliary_level_loss(agent, batch, cfg, ladder=ladder)
    ok, err = _fd_gradient_ok(
        lambda: learning.auxiliary_level_loss(agent, batch, cfg, ladder=ladder)[0],
        agent.theta["even"], g["even"], rng)
    items.append(("gradient: auxiliary improvement", ok, f"worst abs err {err:.2e}"))


def _verify_lyapunov(items: list, seed: int = 0, samples: int = 200,
                     closed_form=lyapunov_derivative_closed_form) -> None:
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    detail = ""
    for _ in range(samples):
        dyn = Dynamics2x2(
            u_r=float(rng.uniform(0.5, 3.0)),
            b_r=float(rng.uniform(-2.0, 2.0)),
            u_c=float(-rng.uniform(0.5, 3.0)),
            b_c=float(rng.uniform(-2.0, 2.0)),
            zeta=float(rng.choice([0.05, 0.1, 0.2])),
            level=int(rng.integers(0, 4)),
        )
        point = rng.uniform(0.0, 1.0, size=2)
        cf = closed_form(dyn, point)
        num = lyapunov_derivative_numeric(dyn, point)
        err = abs(cf - num) / max(abs(num), 1e-12)
        worst = max(worst, err if abs(num) > 1e-12 else abs(cf - num))
        if abs(cf - num) > 1e-9 * max(abs(num), 1.0) + 1e-12:
            ok = False
            detail = f"level {dyn.level} point {point}: closed {cf} vs numeric {num}"
            break
    items.append(("lyapunov: closed form vs chain rule", ok,
                  detail or f"{samples} samples, worst rel err {worst:.2e}"))


def _verify_reasoning(items: list, seed: int = 0) -> None:
    ok = True
    detail = ""
    for lam in (0.5, 1.5, 5.0):
        for k in range(1, 7):
            w = poisson_weights(lam, k)
            for m in range(1, k + 1):
                if abs(w[m] / w[m - 1] - lam / m) > 1e-12:
                    ok = False
                    detail = f"ratio broken at lambda={lam} k={k} m={m}"
    items.append(("reasoning: mixture weight ratios", ok, detail or "lambda in {0.5,1.5,5}, k <= 6"))
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    view = JointQView(
        values={(0, a, b): float(q[a, b]) for a in range(3) for b in range(4)},
        own_action_support=tuple(range(3)),
        opp_action_support=tuple(range(4)),
    )
    worst = 0.0
    for a in range(3):
        post = opponent_posterior(view, 0, a)
        row = q[a]
        ref = np.exp(row - row.max())
        ref /= ref.sum()
        worst = max(worst, float(np.abs(post - ref).max()))
        soft = soft_max_operator(row)
        worst = max(worst, abs(soft - float(np.logaddexp.reduce(row))))
    items.append(("reasoning: posterior and soft operator", worst <= 1e-12,
                  f"worst abs err {worst:.2e}"))


def run_verify(cfg: ExperimentConfig, _closed_form=lyapunov_derivative_closed_form) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    items: list[tuple[str, bool, str]] = []
    if cfg.k_max == 0:
        items.append(("absorption battery", True,
                      "warning: k_max=0 examines no levels, absorption holds vacuously"))
    else:
        report = absorption_battery(seed=cfg.battery_seed, count=cfg.battery_count, k_max=cfg.k_max)
        detail = (f"{report.reached_nash}/{report.count} chains reached a pure Nash, all held"
                  if report.holds else "; ".join(report.failures[:3]))
        items.append(("absorption battery", report.holds, detail))
    _verify_gradients(items, seed=cfg.battery_seed)
    _verify_lyapunov(items, seed=cfg.battery_seed, closed_form=_closed_form)
    _verify_reasoning(items, seed=cfg.battery_seed)
    all_ok = all(ok for _, ok, _ in items)
    lines = [f"job: verify\nconfig_hash: {config_hash(cfg)}"]
    for name, ok, detail in items:
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    lines.append("result: " + ("all checks passed" if all_ok else "FAILURES PRESENT"))
    text = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0 if all_ok else 1


# --------------------------------------------------------------------- main


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gr2",
        description="Level-k reasoning experiments: dynamics, training, tournaments, verification.",
    )
    parser.add_argument("job", choices=JOBS)
    parser.add_argument("--config", help="JSON experiment description")
    parser.add_argument("--out", help="output directory (default: runs)")
    parser.add_argument("--seeds", help="comma-separated seed list, overrides the config")
    args = parser.parse_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    raw = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}")
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}")
        seeds = None
        if args.seeds:
            try:
                seeds = tuple(int(s) for s in args.seeds.split(","))
            except ValueError:
                raise ConfigError(f"bad --seeds value: {args.seeds!r}")
        cfg = parse_config(raw, job=args.job, out=args.out, seeds=seeds)
        runner = {
            "dynamics": run_dynamics,
            "train": run_train,
            "tournament": run_tournament,
            "verify": run_verify,
        }[cfg.job]
        return runner(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
