"""Time the compiled kernels against the pure-numpy fallbacks.

The kernel choice is made once at import from the GR2_NUMBA environment
variable, so each mode runs in its own subprocess and the parent prints
the comparison. Three workloads cover the hot paths: MLP forward passes,
MLP forward+backward through the tape, and the fixed-step RK4 integrator.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _bench_child(repeat: int) -> dict:
    import numpy as np

    from gr2 import autodiff as ad
    from gr2.accel import NUMBA_ENABLED
    from gr2.approx import MLPSpec, mlp_apply, mlp_forward
    from gr2.dynamics import Dynamics2x2, integrate
    from gr2.games import rotational_game

    rng = np.random.default_rng(0)
    spec = MLPSpec(3, (10, 10), 2)
    params = spec.init(rng)
    dyn = Dynamics2x2.from_game(rotational_game(), zeta=0.1, level=2)

    def fwd(batch):
        x = rng.uniform(-1.0, 1.0, (batch, 3))
        return lambda: mlp_forward(spec, params, x)

    def fwd_bwd(batch):
        x = rng.uniform(-1.0, 1.0, (batch, 3))

        def run():
            p = ad.Tensor(params, requires_grad=True)
            ad.tmean(mlp_apply(spec, p, x)).backward()

        return run

    def rk4():
        integrate(dyn, (0.2, 0.8), dt=1e-3, horizon=10.0)

    # batch 1 is the acting path, 64 the update path; 256 shows where
    # vectorized numpy catches back up on the plain forward
    workloads = (
        ("mlp_forward_b1", fwd(1), 4000),
        ("mlp_forward_b64", fwd(64), 4000),
        ("mlp_forward_b256", fwd(256), 2000),
        ("mlp_forward_backward_b64", fwd_bwd(64), 400),
        ("rk4_integrate", rk4, 20),
    )
    results = {"numba": NUMBA_ENABLED}
    for name, fn, iters in workloads:
        fn()  # warm up (and compile, in the numba case)
        best = min(_time_block(fn, iters) for _ in range(repeat))
        results[name] = best / iters
    return results


def _time_block(fn, iters: int) -> float:
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return time.perf_counter() - t0


def _run_mode(numba_on: bool, repeat: int) -> dict:
    env = dict(os.environ, GR2_NUMBA="1" if numba_on else "0")
    out = subprocess.run(
        [sys.executable, __file__, "--child", "--repeat", str(repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3,
                        help="timing repetitions per workload, best is kept")
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.child:
        print(json.dumps(_bench_child(args.repeat)))
        return 0

    fast = _run_mode(True, args.repeat)
    slow = _run_mode(False, args.repeat)
    if not fast["numba"]:
        print("numba unavailable; both runs used the numpy fallback")
    names = ("mlp_forward_b1", "mlp_forward_b64", "mlp_forward_b256",
             "mlp_forward_backward_b64", "rk4_integrate")
    width = max(len(n) for n in names)
    print(f"{'workload':<{width}}  {'numba':>12}  {'numpy':>12}  {'speedup':>8}")
    for name in names:
        ratio = slow[name] / fast[name]
        print(f"{name:<{width}}  {fast[name] * 1e6:>10.1f}us  "
              f"{slow[name] * 1e6:>10.1f}us  {ratio:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
