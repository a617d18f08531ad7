"""Function approximators and their optimizer.

Every network is a 2-hidden-layer rectifier MLP whose parameters live in
one flat float64 vector with named per-layer views. The forward/backward
pair is a single fused primitive on the autodiff tape; the hot kernels
are numba-compiled when enabled, with a vectorized numpy fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accel import NUMBA_ENABLED, maybe_njit
from .autodiff import Tensor, _accum, _node, clip, ensure, exp, softplus, tanh, tsum

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MLPSpec:
    """Shape of one network: input width, two hidden widths, output width."""

    n_in: int
    hidden: tuple[int, int] = (10, 10)
    n_out: int = 1

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or min(self.hidden) < 1:
            raise ValueError(f"bad MLP shape {self}")
        if len(self.hidden) != 2:
            raise ValueError("exactly two hidden layers")

    @property
    def param_count(self) -> int:
        h1, h2 = self.hidden
        return self.n_in * h1 + h1 + h1 * h2 + h2 + h2 * self.n_out + self.n_out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer, flat layout."""
        h1, h2 = self.hidden
        chunks = []
        for fan_in, fan_out in ((self.n_in, h1), (h1, h2), (h2, self.n_out)):
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, fan_out))
        return np.concatenate(chunks)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named per-layer views into the flat vector (no copies)."""
        h1, h2 = self.hidden
        n_in, n_out = self.n_in, self.n_out
        if flat.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {flat.shape}")
        o = 0
        out = {}
        for name, shape in (
            ("w1", (n_in, h1)),
            ("b1", (h1,)),
            ("w2", (h1, h2)),
            ("b2", (h2,)),
            ("w3", (h2, n_out)),
            ("b3", (n_out,)),
        ):
            size = int(np.prod(shape))
            out[name] = flat[o : o + size].reshape(shape)
            o += size
        return out


def _mlp_fwd_loops(p, x, h1, h2, n_out, a1, a2, out):
    B, n_in = x.shape
    o_b1 = n_in * h1
    o_w2 = o_b1 + h1
    o_b2 = o_w2 + h1 * h2
    o_w3 = o_b2 + h2
    o_b3 = o_w3 + h2 * n_out
    for b in range(B):
        for j in range(h1):
            acc = p[o_b1 + j]
            for i in range(n_in):
                acc += x[b, i] * p[i * h1 + j]
            a1[b, j] = acc if acc > 0.0 else 0.0
        for j in range(h2):
            acc = p[o_b2 + j]
            for i in range(h1):
                acc += a1[b, i] * p[o_w2 + i * h2 + j]
            a2[b, j] = acc if acc > 0.0 else 0.0
        for j in range(n_out):
            acc = p[o_b3 + j]
            for i in range(h2):
                acc += a2[b, i] * p[o_w3 + i * n_out + j]
            out[b, j] = acc


def _mlp_bwd_loops(p, x, a1, a2, gout, gp, gx):
    B, n_in = x.shape
    h1 = a1.shape[1]
    h2 = a2.shape[1]
    n_out = gout.shape[1]
    o_b1 = n_in * h1
    o_w2 = o_b1 + h1
    o_b2 = o_w2 + h1 * h2
    o_w3 = o_b2 + h2
    o_b3 = o_w3 + h2 * n_out
    d2 = np.empty(h2)
    d1 = np.empty(h1)
    for b in range(B):
        for o in range(n_out):
            gp[o_b3 + o] += gout[b, o]
        for j in range(h2):
            acc = 0.0
            for o in range(n_out):
                acc += p[o_w3 + j * n_out + o] * gout[b, o]
                gp[o_w3 + j * n_out + o] += a2[b, j] * gout[b, o]
            d2[j] = acc if a2[b, j] > 0.0 else 0.0
            gp[o_b2 + j] += d2[j]
        for i in range(h1):
            acc = 0.0
            for j in range(h2):
                acc += p[o_w2 + i * h2 + j] * d2[j]
                gp[o_w2 + i * h2 + j] += a1[b, i] * d2[j]
            d1[i] = acc if a1[b, i] > 0.0 else 0.0
            gp[o_b1 + i] += d1[i]
        for i in range(n_in):
            acc = 0.0
            for j in range(h1):
                acc += p[i * h1 + j] * d1[j]
                gp[i * h1 + j] += x[b, i] * d1[j]
            gx[b, i] = acc


def _mlp_fwd_numpy(p, x, h1, h2, n_out, a1, a2, out):
    n_in = x.shape[1]
    o = 0
    w1 = p[o : o + n_in * h1].reshape(n_in, h1)
    o += n_in * h1
    b1 = p[o : o + h1]
    o += h1
    w2 = p[o : o + h1 * h2].reshape(h1, h2)
    o += h1 * h2
    b2 = p[o : o + h2]
    o += h2
    w3 = p[o : o + h2 * n_out].reshape(h2, n_out)
    o += h2 * n_out
    b3 = p[o : o + n_out]
    a1[:] = np.maximum(x @ w1 + b1, 0.0)
    a2[:] = np.maximum(a1 @ w2 + b2, 0.0)
    out[:] = a2 @ w3 + b3


def _mlp_bwd_numpy(p, x, a1, a2, gout, gp, gx):
    n_in = x.shape[1]
    h1 = a1.shape[1]
    h2 = a2.shape[1]
    n_out = gout.shape[1]
    o_b1 = n_in * h1
    o_w2 = o_b1 + h1
    o_b2 = o_w2 + h1 * h2
    o_w3 = o_b2 + h2
    o_b3 = o_w3 + h2 * n_out
    w1 = p[:o_b1].reshape(n_in, h1)
    w2 = p[o_w2 : o_w2 + h1 * h2].reshape(h1, h2)
    w3 = p[o_w3 : o_w3 + h2 * n_out].reshape(h2, n_out)
    d2 = (gout @ w3.T) * (a2 > 0.0)
    d1 = (d2 @ w2.T) * (a1 > 0.0)
    gp[o_w3 : o_w3 + h2 * n_out] += (a2.T @ gout).ravel()
    gp[o_b3 : o_b3 + n_out] += gout.sum(axis=0)
    gp[o_w2 : o_w2 + h1 * h2] += (a1.T @ d2).ravel()
    gp[o_b2 : o_b2 + h2] += d2.sum(axis=0)
    gp[:o_b1] += (x.T @ d1).ravel()
    gp[o_b1 : o_b1 + h1] += d1.sum(axis=0)
    gx[:] = d1 @ w1.T


if NUMBA_ENABLED:
    _mlp_fwd = maybe_njit(_mlp_fwd_loops)
    _mlp_bwd = maybe_njit(_mlp_bwd_loops)
else:
    _mlp_fwd = _mlp_fwd_numpy
    _mlp_bwd = _mlp_bwd_numpy


def mlp_apply(spec: MLPSpec, params, x) -> Tensor:
    """Run the MLP as one fused tape primitive.

    Gradients flow to the flat parameter vector and to the inputs, so
    stacking networks (rollouts feeding actions into other networks)
    differentiates end-to-end.
    """
    params = ensure(params)
    xt = ensure(x)
    xd = np.ascontiguousarray(xt.data, dtype=np.float64)
    if xd.ndim != 2 or xd.shape[1] != spec.n_in:
        raise ValueError(f"input shape {xd.shape} does not match n_in={spec.n_in}")
    h1, h2 = spec.hidden
    B = xd.shape[0]
    a1 = np.empty((B, h1))
    a2 = np.empty((B, h2))
    out = np.empty((B, spec.n_out))
    pd = params.data
    _mlp_fwd(pd, xd, h1, h2, spec.n_out, a1, a2, out)

    def bwd(g):
        gp = np.zeros_like(pd)
        gx = np.zeros_like(xd)
        _mlp_bwd(pd, xd, a1, a2, np.ascontiguousarray(g), gp, gx)
        _accum(params, gp)
        _accum(xt, gx)

    return _node(out, (params, xt), bwd)


def mlp_forward(spec: MLPSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass for action selection."""
    xd = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    h1, h2 = spec.hidden
    B = xd.shape[0]
    a1 = np.empty((B, h1))
    a2 = np.empty((B, h2))
    out = np.empty((B, spec.n_out))
    _mlp_fwd(params, xd, h1, h2, spec.n_out, a1, a2, out)
    return out


class Adam:
    """Standard Adam on one flat parameter vector, updated in place."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------- squashed Gaussian head


def split_gaussian_head(net_out: Tensor) -> tuple[Tensor, Tensor]:
    """(mean, clamped log-std) columns of a 2-column network output."""
    mean = net_out[:, 0:1]
    log_std = clip(net_out[:, 1:2], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def squash(u, low: float, high: float) -> Tensor:
    """Map an unbounded pre-action into (low, high) via tanh."""
    mid = 0.5 * (low + high)
    half = 0.5 * (high - low)
    return tanh(u) * half + mid


def squash_log_det(u, low: float, high: float) -> Tensor:
    """log |da/du| for the squash; stable form of log(h(1 - tanh^2 u))."""
    half = 0.5 * (high - low)
    u = ensure(u)
    return (
        2.0 * (np.log(2.0) - u - softplus(-2.0 * u))
        + float(np.log(half))
    )


def normal_log_prob(u, mean, log_std) -> Tensor:
    z = (u - mean) * exp(-ensure(log_std))
    return -0.5 * (z * z) - log_std - 0.5 * _LOG_2PI


def squashed_log_prob(u, mean, log_std, low: float, high: float) -> Tensor:
    """log-density of a = squash(u) when u ~ N(mean, std), summed over the
    (single) action dimension; shape (B, 1)."""
    lp = normal_log_prob(u, mean, log_std) - squash_log_det(u, low, high)
    return tsum(lp, axis=1, keepdims=True)


def normalize(a, low: float, high: float):
    """Map env units into the [-1, 1] network currency."""
    mid = 0.5 * (low + high)
    half = 0.5 * (high - low)
    return (a - mid) / half


def denormalize(a, low: float, high: float):
    mid = 0.5 * (low + high)
    half = 0.5 * (high - low)
    return a * half + mid
