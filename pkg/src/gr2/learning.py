"""Desk-scale GR2 soft actor-critic and its level-0 independent baseline.

Conventions, fixed across the module:

* Networks live entirely in normalized currency: observations and actions
  are mapped into [-1, 1] before they touch any net, and policy outputs
  are squashed back with tanh. Only the environment loop converts to env
  units, so one squash (low=-1, high=1) serves every task. Rewards enter
  the replay buffer multiplied by ``reward_scale`` for the same reason:
  soft values mix exponentiated Q estimates, which only average sensibly
  when per-step rewards are O(1). Reported metrics stay in env units.
* Both built-in tasks are repeated one-shot games, so ``round_terminal``
  defaults to storing each play as a one-step episode (no bootstrap to
  the next round); the observation stream itself never resets.
* Inner rollout levels use Gaussian means (deterministic); only the top
  level samples. Policy parameters are shared across levels of equal
  parity, so a bundle carries one "even" and one "odd" policy vector.
* Each loss is a deterministic function of (parameters, batch, pre-drawn
  noise), which is what makes the finite-difference gradient checks
  possible; when no noise is passed the agent's own stream is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .approx import (
    Adam,
    MLPSpec,
    mlp_apply,
    mlp_forward,
    normalize,
    denormalize,
    split_gaussian_head,
    squashed_log_prob,
    LOG_STD_MIN,
    LOG_STD_MAX,
)
from .games import BeautyContestEnv, MatrixSelfPlayEnv, Transition
from .reasoning import poisson_weights


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; message carries diagnostics."""


@dataclass
class TrainerConfig:
    level: int = 2
    mixture: bool = False
    independent: bool = False
    lambda_mean: float = 1.5
    lr_q: float = 1e-4
    lr_pi: float = 1e-4
    lr_rho: float = 1e-4
    polyak: float = 0.001
    batch_size: int = 64
    gamma: float = 0.95
    iterations: int = 400
    steps_per_iteration: int = 10
    replay_capacity: int = 100_000
    warmup: int = 1000
    exploration_noise: float = 0.1
    noise_steps: int = 1000
    temperature_start: float = 1.0
    temperature_end: float = 0.05
    opp_samples: int = 4
    update_every: int = 1
    updates_per_step: int = 1
    reward_scale: float = 1.0
    round_terminal: bool = True
    auxiliary: bool = True
    ou_theta: float = 0.15
    ou_sigma: float = 0.3
    seeds: tuple = (0, 1, 2, 3, 4, 5)

    def __post_init__(self):
        for name in ("lr_q", "lr_pi", "lr_rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError("polyak must lie in [0, 1]")
        if self.batch_size < 1 or self.batch_size > self.warmup:
            raise ValueError("need 1 <= batch_size <= warmup")
        if self.independent:
            if self.level != 0:
                raise ValueError("the independent baseline is the level-0 learner")
        elif not 1 <= self.level <= 4:
            raise ValueError("recursive training supports levels 1..4")
        if self.mixture and self.level < 1:
            raise ValueError("mixture needs level >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.update_every < 1 or self.updates_per_step < 1:
            raise ValueError("update cadence values must be positive")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.temperature_end > self.temperature_start:
            raise ValueError("temperature anneals downward")

    def temperature(self, iteration: int) -> float:
        if self.iterations <= 1:
            return self.temperature_end
        frac = min(iteration, self.iterations - 1) / (self.iterations - 1)
        return (1.0 - frac) * self.temperature_start + frac * self.temperature_end


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    opp_action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Bounded FIFO ring over per-agent transition views."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, 1))
        self.opp_action = np.zeros((capacity, 1))
        self.reward = np.zeros((capacity, 1))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros((capacity, 1))
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def push(self, obs, action, opp_action, reward, next_obs, done):
        i = self.pos
        self.obs[i] = obs
        self.action[i] = action
        self.opp_action[i] = opp_action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(np.asarray(done).item())
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, tr: Transition):
        """Store one agent's view of a joint transition: state/next_state
        are that agent's observation vectors, actions ordered (own,
        opponent signal). Only the own reward (rewards[0]) is kept."""
        self.push(tr.state, tr.actions[0], tr.actions[1], tr.rewards[0], tr.next_state, tr.terminal)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, batch_size)
        return Batch(
            obs=self.obs[idx],
            action=self.action[idx],
            opp_action=self.opp_action[idx],
            reward=self.reward[idx],
            next_obs=self.next_obs[idx],
            done=self.done[idx],
        )


@dataclass
class AgentBundle:
    """All learned state of one agent: parameter vectors, target copies,
    replay, optimizers, and a private RNG stream."""

    theta: dict
    phi: np.ndarray | None
    omega: dict
    omega_bar: dict
    replay: ReplayBuffer
    rng: np.random.Generator
    specs: dict
    optimizers: dict
    low: float
    high: float
    ou_state: float = 0.0
    env_steps: int = 0

    def __post_init__(self):
        for key, vec in self.omega.items():
            if self.omega_bar[key].shape != vec.shape:
                raise ValueError(f"omega_bar[{key}] shape differs from omega")


def make_agent(cfg: TrainerConfig, obs_dim: int, low: float, high: float, seed) -> AgentBundle:
    """Fresh bundle with independently seeded parameter init and stream."""
    rng = np.random.default_rng(seed)
    specs = {}
    theta = {}
    if cfg.independent:
        specs["mu"] = MLPSpec(obs_dim, (10, 10), 1)
        specs["q_marg"] = MLPSpec(obs_dim + 1, (10, 10), 1)
        theta["mu"] = specs["mu"].init(rng)
        phi = None
        omega = {"marginal": specs["q_marg"].init(rng)}
        opt = {
            "mu": Adam(theta["mu"].size, cfg.lr_pi),
            "marginal": Adam(omega["marginal"].size, cfg.lr_q),
        }
    else:
        specs["pi"] = MLPSpec(obs_dim + 1, (10, 10), 2)
        specs["rho"] = MLPSpec(obs_dim + 1, (10, 10), 2)
        specs["q_joint"] = MLPSpec(obs_dim + 2, (10, 10), 1)
        specs["q_marg"] = MLPSpec(obs_dim + 1, (10, 10), 1)
        theta["even"] = specs["pi"].init(rng)
        theta["odd"] = specs["pi"].init(rng)
        phi = specs["rho"].init(rng)
        omega = {
            "joint": specs["q_joint"].init(rng),
            "marginal": specs["q_marg"].init(rng),
        }
        opt = {
            "even": Adam(theta["even"].size, cfg.lr_pi),
            "odd": Adam(theta["odd"].size, cfg.lr_pi),
            "phi": Adam(phi.size, cfg.lr_rho),
            "joint": Adam(omega["joint"].size, cfg.lr_q),
            "marginal": Adam(omega["marginal"].size, cfg.lr_q),
        }
    omega_bar = {k: v.copy() for k, v in omega.items()}
    return AgentBundle(
        theta=theta,
        phi=phi,
        omega=omega,
        omega_bar=omega_bar,
        replay=ReplayBuffer(cfg.replay_capacity, obs_dim),
        rng=rng,
        specs=specs,
        optimizers=opt,
        low=low,
        high=high,
    )


# ------------------------------------------------------------ environments


def observation_dim(env) -> int:
    if isinstance(env, BeautyContestEnv):
        return 1
    if isinstance(env, MatrixSelfPlayEnv):
        return 2
    raise TypeError(f"unsupported environment {type(env).__name__}")


def initial_observations(env) -> np.ndarray:
    """Episode-start observations: normalized midpoints (all zeros)."""
    return np.zeros((env.n_agents, observation_dim(env)))


def next_observations(env, raw_actions: np.ndarray) -> np.ndarray:
    """Beauty Contest agents see the population mean; matrix players see
    both previous strategies, own first."""
    norm = normalize(np.asarray(raw_actions, dtype=float), env.low, env.high)
    if isinstance(env, BeautyContestEnv):
        return np.full((env.n_agents, 1), norm.mean())
    if isinstance(env, MatrixSelfPlayEnv):
        return np.array([[norm[0], norm[1]], [norm[1], norm[0]]])
    raise TypeError(f"unsupported environment {type(env).__name__}")


def opponent_signal(env, raw_actions: np.ndarray, agent_index: int) -> float:
    """The quantity the opponent model predicts: the lone opponent's
    strategy for matrix games, the mean of the others' guesses for the
    Beauty Contest. Normalized."""
    norm = normalize(np.asarray(raw_actions, dtype=float), env.low, env.high)
    if isinstance(env, BeautyContestEnv):
        others = np.delete(norm, agent_index)
        return float(others.mean())
    if isinstance(env, MatrixSelfPlayEnv):
        return float(norm[1 - agent_index])
    raise TypeError(f"unsupported environment {type(env).__name__}")


# ------------------------------------------------------------------ rollout


def _head_mean(spec: MLPSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return mlp_forward(spec, params, x)[:, 0:1]


def _rollout_numpy(agent: AgentBundle, s: np.ndarray, level: int):
    """Deterministic mean chain up to ``level``; returns (top mean-action,
    conditioning input of the top level, trace list top-down). Everything
    normalized, tape-free."""
    zeros = np.zeros((s.shape[0], 1))
    a = np.tanh(_head_mean(agent.specs["pi"], agent.theta["even"], np.hstack([s, zeros])))
    if level == 0:
        return a, zeros, [a]
    # for odd levels the base action only conditions; it is not a trace entry
    trace = [a] if level % 2 == 0 else []
    j = 1 if level % 2 == 0 else 0
    cond = zeros
    while j <= level - 1:
        b = np.tanh(_head_mean(agent.specs["rho"], agent.phi, np.hstack([s, a])))
        own = j + 1
        params = agent.theta["even" if own % 2 == 0 else "odd"]
        out = mlp_forward(agent.specs["pi"], params, np.hstack([s, b]))
        a = np.tanh(out[:, 0:1])
        trace = [a, b] + trace
        cond = b
        j += 2
    return a, cond, trace


def _rollout_tape(agent, s_t, cfg, theta_even, theta_odd, phi_t, sample_top, eps_top):
    """Level-k chain on the tape. Inner levels are Gaussian means; the top
    level samples via the reparameterization u = mean + std*eps when
    ``sample_top``. Returns (a_top, log-prob or None, trace top-down)."""
    k = cfg.level
    B = s_t.data.shape[0]
    zeros = ad.Tensor(np.zeros((B, 1)))
    pi_spec = agent.specs["pi"]
    rho_spec = agent.specs["rho"]
    out0 = mlp_apply(pi_spec, theta_even, ad.concat([s_t, zeros], axis=1))
    a = ad.tanh(out0[:, 0:1])
    trace = [a] if k % 2 == 0 else []
    logp = None
    j = 1 if k % 2 == 0 else 0
    while j <= k - 1:
        b = ad.tanh(mlp_apply(rho_spec, phi_t, ad.concat([s_t, a], axis=1))[:, 0:1])
        own = j + 1
        th = theta_even if own % 2 == 0 else theta_odd
        out = mlp_apply(pi_spec, th, ad.concat([s_t, b], axis=1))
        mean, log_std = split_gaussian_head(out)
        if own == k and sample_top:
            u = mean + ad.exp(log_std) * ad.Tensor(eps_top)
            a = ad.tanh(u)
            logp = squashed_log_prob(u, mean, log_std, -1.0, 1.0)
        else:
            a = ad.tanh(mean)
        trace = [a, b] + trace
        j += 2
    return a, logp, trace


def act(agent: AgentBundle, s: np.ndarray, cfg: TrainerConfig, explore: bool):
    """One normalized action plus the inter-level trace (top-down).

    GR2 agents run the deterministic chain and sample only the top level;
    the mixture variant averages all level actions under Poisson weights.
    The level-0 baseline is deterministic with OU exploration noise.
    """
    s2 = np.atleast_2d(np.asarray(s, dtype=float))
    if cfg.independent:
        a = float(np.tanh(mlp_forward(agent.specs["mu"], agent.theta["mu"], s2))[0, 0])
        if explore:
            agent.ou_state = (1.0 - cfg.ou_theta) * agent.ou_state + cfg.ou_sigma * float(
                agent.rng.standard_normal()
            )
            a = float(np.clip(a + agent.ou_state, -1.0, 1.0))
        return a, (a,)

    k = cfg.level
    eps = float(agent.rng.standard_normal())
    _, cond, trace = _rollout_numpy(agent, s2, k)
    if k == 0:
        top = float(trace[0][0, 0])
        chosen = top
    else:
        out = mlp_forward(agent.specs["pi"], _top_theta(agent, k), np.hstack([s2, cond]))
        mean, log_std = out[0, 0], float(np.clip(out[0, 1], LOG_STD_MIN, LOG_STD_MAX))
        u = mean + math.exp(log_std) * eps
        top = float(np.tanh(u))
        trace = [np.array([[top]])] + trace[1:]
        chosen = top
    if cfg.mixture:
        weights = poisson_weights(cfg.lambda_mean, k)
        levels = [_rollout_numpy(agent, s2, m)[0][0, 0] for m in range(k)]
        levels.append(top)
        chosen = float(np.dot(weights, levels))
    if explore and agent.env_steps < cfg.noise_steps:
        chosen += cfg.exploration_noise * float(agent.rng.standard_normal())
        chosen = float(np.clip(chosen, -1.0, 1.0))
    return chosen, tuple(float(t[0, 0]) for t in trace)


def _top_theta(agent: AgentBundle, level: int) -> np.ndarray:
    return agent.theta["even" if level % 2 == 0 else "odd"]


# -------------------------------------------------------------------- losses


def _require_batch(batch: Batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


def _grad_of(leaf: ad.Tensor, like: np.ndarray) -> np.ndarray:
    return leaf.grad if leaf.grad is not None else np.zeros_like(like)


def _critic_noise(agent, cfg, B):
    return {
        "eps_top": agent.rng.standard_normal((B, 1)),
        "eps_next": agent.rng.standard_normal((B, cfg.opp_samples)),
        "eps_marg": agent.rng.standard_normal((B, cfg.opp_samples)),
    }


def _next_state_value(agent, cfg, batch, noise, temperature) -> np.ndarray:
    """V(s') = log-mean-exp of target joint Q over opponent samples, minus
    the temperature-weighted policy log-density. Constant (no tape)."""
    s_next = ad.Tensor(batch.next_obs)
    te = ad.Tensor(agent.theta["even"])
    to = ad.Tensor(agent.theta["odd"])
    ph = ad.Tensor(agent.phi)
    a_next, logp, _ = _rollout_tape(
        agent, s_next, cfg, te, to, ph, sample_top=cfg.level >= 1, eps_top=noise["eps_top"]
    )
    samples = _sample_opponents(agent, batch.next_obs, a_next.data, noise["eps_next"])
    q_next = _joint_q_on(agent, agent.omega_bar["joint"], batch.next_obs, a_next.data, samples)
    v = q_next - temperature * (logp.data if logp is not None else 0.0)
    return v


def _sample_opponents(agent, obs, a_norm, eps) -> np.ndarray:
    """Draw opponent actions from the Gaussian rho head, tape-free."""
    out = mlp_forward(agent.specs["rho"], agent.phi, np.hstack([obs, a_norm]))
    mean = out[:, 0:1]
    log_std = np.clip(out[:, 1:2], LOG_STD_MIN, LOG_STD_MAX)
    return np.tanh(mean + np.exp(log_std) * eps)


def _joint_q_on(agent, params, obs, a_norm, b_samples) -> np.ndarray:
    """log-mean-exp over opponent samples of a joint-Q evaluation."""
    B, m = b_samples.shape
    rows = np.hstack(
        [np.repeat(obs, m, axis=0), np.repeat(a_norm, m, axis=0), b_samples.reshape(-1, 1)]
    )
    q = mlp_forward(agent.specs["q_joint"], params, rows).reshape(B, m)
    shift = q.max(axis=1, keepdims=True)
    return shift + np.log(np.exp(q - shift).mean(axis=1, keepdims=True))


def critic_targets(agent, batch: Batch, cfg: TrainerConfig, noise, temperature):
    """(y_joint, y_marg): bootstrap targets for the two Q heads.

    y_joint = r + gamma * (1 - done) * V(s'); terminal transitions reduce
    to the reward alone. y_marg is the log-mean-exp of target joint Q over
    opponent-model samples at the stored pair.
    """
    v_next = _next_state_value(agent, cfg, batch, noise, temperature)
    y_joint = batch.reward + cfg.gamma * (1.0 - batch.done) * v_next
    b_marg = _sample_opponents(agent, batch.obs, batch.action, noise["eps_marg"])
    y_marg = _joint_q_on(agent, agent.omega_bar["joint"], batch.obs, batch.action, b_marg)
    return y_joint, y_marg


def critic_loss(agent, batch: Batch, cfg: TrainerConfig, noise=None, temperature=None):
    """Soft Bellman residual for both Q heads; returns (loss, grads)."""
    _require_batch(batch)
    temperature = cfg.temperature_start if temperature is None else temperature
    if cfg.independent:
        a_next = np.tanh(mlp_forward(agent.specs["mu"], agent.theta["mu"], batch.next_obs))
        q_next = mlp_forward(
            agent.specs["q_marg"], agent.omega_bar["marginal"], np.hstack([batch.next_obs, a_next])
        )
        y = batch.reward + cfg.gamma * (1.0 - batch.done) * q_next
        w = ad.Tensor(agent.omega["marginal"], requires_grad=True)
        q = mlp_apply(agent.specs["q_marg"], w, np.hstack([batch.obs, batch.action]))
        resid = q - ad.Tensor(y)
        loss = 0.5 * ad.tmean(resid * resid)
        loss.backward()
        return loss.item(), {"marginal": _grad_of(w, agent.omega["marginal"])}

    if noise is None:
        noise = _critic_noise(agent, cfg, len(batch))
    y_joint, y_marg = critic_targets(agent, batch, cfg, noise, temperature)

    w_j = ad.Tensor(agent.omega["joint"], requires_grad=True)
    w_m = ad.Tensor(agent.omega["marginal"], requires_grad=True)
    q_j = mlp_apply(
        agent.specs["q_joint"], w_j, np.hstack([batch.obs, batch.action, batch.opp_action])
    )
    q_m = mlp_apply(agent.specs["q_marg"], w_m, np.hstack([batch.obs, batch.action]))
    r_j = q_j - ad.Tensor(y_joint)
    r_m = q_m - ad.Tensor(y_marg)
    loss = 0.5 * ad.tmean(r_j * r_j) + 0.5 * ad.tmean(r_m * r_m)
    loss.backward()
    return loss.item(), {
        "joint": _grad_of(w_j, agent.omega["joint"]),
        "marginal": _grad_of(w_m, agent.omega["marginal"]),
    }


def opponent_model_loss(agent, batch: Batch, cfg: TrainerConfig, noise=None):
    """Reparameterized KL between rho and the joint-Q posterior."""
    _require_batch(batch)
    if cfg.independent:
        return 0.0, {}
    if noise is None:
        noise = {"eps": agent.rng.standard_normal((len(batch), cfg.opp_samples))}
    B = len(batch)
    m = noise["eps"].shape[1]
    ph = ad.Tensor(agent.phi, requires_grad=True)
    x = np.hstack([batch.obs, batch.action])
    out = mlp_apply(agent.specs["rho"], ph, x)
    mean, log_std = split_gaussian_head(out)
    u = mean + ad.exp(log_std) * ad.Tensor(noise["eps"])  # (B, m)
    b = ad.tanh(u)
    log_rho = (
        -0.5 * ((u - mean) * ad.exp(-log_std)) ** 2.0
        - log_std
        - 0.5 * math.log(2.0 * math.pi)
        - 2.0 * (math.log(2.0) - u - ad.softplus(-2.0 * u))
    )
    rows = ad.concat(
        [
            ad.Tensor(np.repeat(np.hstack([batch.obs, batch.action]), m, axis=0)),
            ad.reshape(b, (B * m, 1)),
        ],
        axis=1,
    )
    q_joint = ad.reshape(mlp_apply(agent.specs["q_joint"], ad.Tensor(agent.omega["joint"]), rows), (B, m))
    q_marg = mlp_forward(agent.specs["q_marg"], agent.omega["marginal"], x)
    loss = ad.tmean(log_rho - (q_joint - ad.Tensor(q_marg)))
    loss.backward()
    return loss.item(), {"phi": _grad_of(ph, agent.phi)}


def opponent_model_grid_loss(spec: MLPSpec, phi: np.ndarray, states: np.ndarray, q_rows: np.ndarray):
    """Discrete-grid variant: KL(rho_phi || softmax(Q row)) averaged over
    states, with the exact categorical KL. Returns (loss, grad)."""
    ph = ad.Tensor(phi, requires_grad=True)
    logits = mlp_apply(spec, ph, states)
    log_rho = logits - ad.logsumexp(logits, axis=1, keepdims=True)
    logp = q_rows - _np_logsumexp(q_rows)
    kl = ad.tsum(ad.exp(log_rho) * (log_rho - ad.Tensor(logp)), axis=1, keepdims=True)
    loss = ad.tmean(kl)
    loss.backward()
    return loss.item(), _grad_of(ph, phi)


def _np_logsumexp(q: np.ndarray) -> np.ndarray:
    shift = q.max(axis=1, keepdims=True)
    return shift + np.log(np.exp(q - shift).sum(axis=1, keepdims=True))


def actor_loss(agent, batch: Batch, cfg: TrainerConfig, noise=None, temperature=None):
    """Reparameterized policy loss, differentiated through the rollout."""
    _require_batch(batch)
    temperature = cfg.temperature_start if temperature is None else temperature
    if cfg.independent:
        th = ad.Tensor(agent.theta["mu"], requires_grad=True)
        a = ad.tanh(mlp_apply(agent.specs["mu"], th, batch.obs))
        q = mlp_apply(
            agent.specs["q_marg"],
            ad.Tensor(agent.omega["marginal"]),
            ad.concat([ad.Tensor(batch.obs), a], axis=1),
        )
        loss = -ad.tmean(q)
        loss.backward()
        return loss.item(), {"mu": _grad_of(th, agent.theta["mu"])}

    if noise is None:
        noise = {"eps_top": agent.rng.standard_normal((len(batch), 1))}
    te = ad.Tensor(agent.theta["even"], requires_grad=True)
    to = ad.Tensor(agent.theta["odd"], requires_grad=True)
    ph = ad.Tensor(agent.phi)
    s_t = ad.Tensor(batch.obs)
    a_top, logp, _ = _rollout_tape(
        agent, s_t, cfg, te, to, ph, sample_top=True, eps_top=noise["eps_top"]
    )
    q = mlp_apply(
        agent.specs["q_marg"],
        ad.Tensor(agent.omega["marginal"]),
        ad.concat([s_t, a_top], axis=1),
    )
    loss = ad.tmean(temperature * logp - q)
    loss.backward()
    return loss.item(), {
        "even": _grad_of(te, agent.theta["even"]),
        "odd": _grad_of(to, agent.theta["odd"]),
    }


def level_ladder(agent: AgentBundle, obs: np.ndarray, level: int):
    """Deterministic actions and beliefs for every level up to ``level``.

    Returns (actions, beliefs) where actions[m] is the level-m mean action
    and beliefs[m] = rho(s, actions[m-1]) for m >= 1. The bottom rung pairs
    the level-1 response with the belief about a level-0 opponent, so both
    parities of the shared policy net appear in the ladder even though a
    single rollout chain only visits every other level. Numpy, tape-free.
    """
    a = np.tanh(_head_mean(agent.specs["pi"], agent.theta["even"], np.hstack([obs, np.zeros((obs.shape[0], 1))])))
    actions = [a]
    beliefs = [None]
    for m in range(1, level + 1):
        b = np.tanh(_head_mean(agent.specs["rho"], agent.phi, np.hstack([obs, actions[m - 1]])))
        beliefs.append(b)
        cond = beliefs[1] if m == 1 else beliefs[m - 1]
        params = agent.theta["even" if m % 2 == 0 else "odd"]
        actions.append(np.tanh(_head_mean(agent.specs["pi"], params, np.hstack([obs, cond]))))
    return actions, beliefs


def auxiliary_level_loss(agent, batch: Batch, cfg: TrainerConfig, ladder=None):
    """Negated inter-level improvement gaps, one per level m = 2..k.

    Descent on each gap raises Q(s, a_m, b_{m-1}) above the yardstick
    Q(s, a_{m-2}, b_{m-1}). The belief b_{m-1} and the yardstick a_{m-2}
    enter as fixed data: only the level-m response is trained. Letting
    the gradient reach the yardstick would reward degrading the lower
    levels instead (the gap grows just as well that way), which in
    practice drives the level-0 root action into the bound of the action
    interval. Summing over every level rather than only the top one gives
    both parity nets a direct best-response signal; with only the top gap
    an odd top level would leave the even net trained solely through the
    long chain-rule path. Below level 2 there is no gap and the loss is
    exactly zero.

    ``ladder`` overrides the deterministic (actions, beliefs) ladder;
    gradient checks pass a frozen one so the differentiable surface is
    exactly the one reported.
    """
    _require_batch(batch)
    zero = {
        key: np.zeros_like(vec) for key, vec in agent.theta.items()
    }
    if cfg.independent or cfg.level < 2:
        return 0.0, zero
    actions, beliefs = ladder if ladder is not None else level_ladder(agent, batch.obs, cfg.level)
    s_t = ad.Tensor(batch.obs)
    taped = {key: ad.Tensor(vec, requires_grad=True) for key, vec in agent.theta.items()}
    total = None
    for m in range(2, cfg.level + 1):
        b_prev, a_low = beliefs[m - 1], actions[m - 2]
        th = taped["even" if m % 2 == 0 else "odd"]
        out = mlp_apply(agent.specs["pi"], th, ad.concat([s_t, ad.Tensor(b_prev)], axis=1))
        a_m = ad.tanh(out[:, 0:1])
        q_m = mlp_apply(
            agent.specs["q_joint"],
            ad.Tensor(agent.omega["joint"]),
            ad.concat([s_t, a_m, ad.Tensor(b_prev)], axis=1),
        )
        q_low = mlp_forward(
            agent.specs["q_joint"], agent.omega["joint"], np.hstack([batch.obs, a_low, b_prev])
        )
        gap = ad.tmean(q_m) - ad.Tensor(np.array(q_low.mean()))
        total = gap if total is None else total + gap
    loss = -1.0 * total
    loss.backward()
    grads = {key: _grad_of(taped[key], agent.theta[key]) for key in agent.theta}
    return loss.item(), grads


def level_gap_values(agent, batch: Batch, cfg: TrainerConfig) -> tuple[float, float]:
    """(E[Q(s, a_k, b_{k-1})], E[Q(s, a_{k-2}, b_{k-1})]) on the current
    deterministic trace; the dominance diagnostic."""
    _, _, trace = _rollout_numpy(agent, batch.obs, cfg.level)
    a_top, b_prev, a_low = trace[0], trace[1], trace[2]
    q_top = mlp_forward(
        agent.specs["q_joint"], agent.omega["joint"], np.hstack([batch.obs, a_top, b_prev])
    )
    q_low = mlp_forward(
        agent.specs["q_joint"], agent.omega["joint"], np.hstack([batch.obs, a_low, b_prev])
    )
    return float(q_top.mean()), float(q_low.mean())


def target_update(agent: AgentBundle, cfg: TrainerConfig):
    """Polyak step omega_bar <- psi*omega + (1-psi)*omega_bar, in place."""
    psi = cfg.polyak
    for key, vec in agent.omega.items():
        agent.omega_bar[key] *= 1.0 - psi
        agent.omega_bar[key] += psi * vec


# --------------------------------------------------------------------- train


@dataclass
class RunRecord:
    metrics: list
    final_mean_actions: np.ndarray
    gap_history: list
    config: TrainerConfig


def _check_finite(agent, name, value, batch):
    if math.isfinite(value):
        return
    norms = {k: float(np.linalg.norm(v)) for k, v in agent.theta.items()}
    norms.update({f"omega_{k}": float(np.linalg.norm(v)) for k, v in agent.omega.items()})
    raise TrainingDiverged(
        f"{name} became {value}; parameter norms {norms}; "
        f"batch reward range [{batch.reward.min()}, {batch.reward.max()}]"
    )


def _update_agent(agent, cfg, temperature):
    batch = agent.replay.sample(agent.rng, cfg.batch_size)
    l_q, g_q = critic_loss(agent, batch, cfg, temperature=temperature)
    _check_finite(agent, "critic loss", l_q, batch)
    for key, grad in g_q.items():
        agent.optimizers[key].step(agent.omega[key], grad)

    l_rho = 0.0
    if not cfg.independent:
        l_rho, g_rho = opponent_model_loss(agent, batch, cfg)
        _check_finite(agent, "opponent-model loss", l_rho, batch)
        agent.optimizers["phi"].step(agent.phi, g_rho["phi"])

    l_pi, g_pi = actor_loss(agent, batch, cfg, temperature=temperature)
    _check_finite(agent, "actor loss", l_pi, batch)
    l_aux = 0.0
    gap = None
    if not cfg.independent and cfg.level >= 2:
        gap = level_gap_values(agent, batch, cfg)
        if cfg.auxiliary:
            l_aux, g_aux = auxiliary_level_loss(agent, batch, cfg)
            _check_finite(agent, "auxiliary loss", l_aux, batch)
            for key in g_pi:
                g_pi[key] = g_pi[key] + g_aux[key]
    if cfg.independent:
        agent.optimizers["mu"].step(agent.theta["mu"], g_pi["mu"])
    else:
        for key in ("even", "odd"):
            agent.optimizers[key].step(agent.theta[key], g_pi[key])
    return l_q, l_pi, l_rho, l_aux, gap


def train(env, agents: Sequence[AgentBundle], cfg: TrainerConfig) -> RunRecord:
    """Run Algorithm-1 style training; one RunRecord with per-iteration
    metric rows `iteration,step,agent,mean_action,mean_reward,loss_*`."""
    n = env.n_agents
    if len(agents) != n:
        raise ValueError(f"need {n} agents, got {len(agents)}")
    obs = initial_observations(env)
    metrics = []
    gap_history = []
    global_step = 0
    final_means = np.zeros(n)
    for it in range(cfg.iterations):
        temp = cfg.temperature(it)
        act_sums = np.zeros(n)
        rew_sums = np.zeros(n)
        loss_lists = [([], [], [], []) for _ in range(n)]
        for step in range(cfg.steps_per_iteration):
            a_norm = np.zeros(n)
            for i, agent in enumerate(agents):
                a_norm[i], _ = act(agent, obs[i], cfg, explore=True)
                agent.env_steps += 1
            raw = denormalize(a_norm, env.low, env.high)
            rewards = env.step(raw)
            # Rounds of a repeated game do not couple through state, so by
            # default each play is stored as its own one-step episode and
            # the observation stream simply continues. Multi-step credit
            # assignment stays available for environments that need it.
            done = True if cfg.round_terminal else step == cfg.steps_per_iteration - 1
            nxt = next_observations(env, raw)
            for i, agent in enumerate(agents):
                agent.replay.push(
                    obs[i],
                    a_norm[i],
                    opponent_signal(env, raw, i),
                    cfg.reward_scale * rewards[i],
                    nxt[i],
                    done,
                )
            global_step += 1
            do_update = (
                len(agents[0].replay) >= cfg.warmup and global_step % cfg.update_every == 0
            )
            for i, agent in enumerate(agents):
                if do_update:
                    for _ in range(cfg.updates_per_step):
                        l_q, l_pi, l_rho, l_aux, gap = _update_agent(agent, cfg, temp)
                        loss_lists[i][0].append(l_q)
                        loss_lists[i][1].append(l_pi)
                        loss_lists[i][2].append(l_rho)
                        loss_lists[i][3].append(l_aux)
                        if gap is not None:
                            gap_history.append(gap)
                target_update(agent, cfg)
            act_sums += raw
            rew_sums += np.asarray(rewards)
            if cfg.round_terminal or not done:
                obs = nxt
            else:
                obs = initial_observations(env)
        for i in range(n):
            ls = loss_lists[i]
            metrics.append(
                {
                    "iteration": it,
                    "step": global_step,
                    "agent": i,
                    "mean_action": act_sums[i] / cfg.steps_per_iteration,
                    "mean_reward": rew_sums[i] / cfg.steps_per_iteration,
                    "loss_q": float(np.mean(ls[0])) if ls[0] else math.nan,
                    "loss_pi": float(np.mean(ls[1])) if ls[1] else math.nan,
                    "loss_rho": float(np.mean(ls[2])) if ls[2] else math.nan,
                    "loss_aux": float(np.mean(ls[3])) if ls[3] else math.nan,
                }
            )
        final_means = act_sums / cfg.steps_per_iteration
    return RunRecord(
        metrics=metrics,
        final_mean_actions=final_means,
        gap_history=gap_history,
        config=cfg,
    )


# --------------------------------------------------------------- checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path, agents: Sequence[AgentBundle], config_hash: str):
    """All parameter vectors of every agent plus the config hash."""
    payload = {"version": np.array(CHECKPOINT_VERSION), "config_hash": np.array(config_hash)}
    for i, agent in enumerate(agents):
        for key, vec in agent.theta.items():
            payload[f"agent{i}_theta_{key}"] = vec
        if agent.phi is not None:
            payload[f"agent{i}_phi"] = agent.phi
        for key, vec in agent.omega.items():
            payload[f"agent{i}_omega_{key}"] = vec
            payload[f"agent{i}_omega_bar_{key}"] = agent.omega_bar[key]
    np.savez(path, **payload)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        out = {k: data[k] for k in data.files}
    if int(out["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {out['version']}")
    return out
