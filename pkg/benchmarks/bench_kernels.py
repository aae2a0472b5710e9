"""Time the numba kernels against their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py --reps 200 --steps 20000

Each kernel is compiled (first call) before timing; the reported figure is
the best of ``--repeat`` runs. Results are checked for agreement.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from nanodeloc import _accel, kernels
from nanodeloc.config import preset_params
from nanodeloc.dynamics import two_pulse
from nanodeloc.retrodiction import filter_matrices
from nanodeloc.simulate import SimConfig, simulate_ensemble, transition_plan


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def propagate_inputs(reps: int, steps: int, seed: int):
    p = preset_params("paper-39dB").replace(f0_mean=1e4)
    dt = 2e-7
    cfg = SimConfig(p, two_pulse(2.45), dt=dt, duration=steps * dt, repetitions=1)
    plan = transition_plan(cfg)
    n = len(plan.m)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(reps, 2))
    f0 = np.full(reps, p.f0_mean)
    xi = rng.standard_normal((reps, n, 2))
    return x0, f0, plan.m, plan.b, plan.chol, xi


def filter_inputs(reps: int, steps: int, seed: int):
    p = preset_params("paper-39dB")
    f, k = filter_matrices(p)
    dt = 2e-7
    ad = np.eye(2) + dt * f
    bd = dt * k
    u = np.random.default_rng(seed).normal(size=(reps, steps))
    return u, ad, bd


def run(reps: int, steps: int, repeat: int, seed: int) -> dict:
    if not _accel.USE_NUMBA:
        raise SystemExit("numba unavailable or disabled; nothing to compare")
    out = {}
    args = propagate_inputs(reps, steps, seed)
    a = kernels.propagate(*args, use_numba=True)
    b = kernels.propagate(*args, use_numba=False)
    out["propagate"] = {
        "numba_s": best_of(lambda: kernels.propagate(*args, use_numba=True), repeat),
        "numpy_s": best_of(lambda: kernels.propagate(*args, use_numba=False), repeat),
        "max_abs_diff": float(np.max(np.abs(a - b))),
    }
    u, ad, bd = filter_inputs(reps, steps, seed)
    a = kernels.filter2(u, ad, bd, use_numba=True)
    b = kernels.filter2(u, ad, bd, use_numba=False)
    out["filter2"] = {
        "numba_s": best_of(lambda: kernels.filter2(u, ad, bd, use_numba=True), repeat),
        "numpy_s": best_of(lambda: kernels.filter2(u, ad, bd, use_numba=False), repeat),
        "max_abs_diff": float(np.max(np.abs(a - b))),
    }
    p = preset_params("paper-39dB")
    cfg = SimConfig(p, two_pulse(2.45), duration=steps * 2e-7, repetitions=reps, seed=seed)
    simulate_ensemble(cfg, use_numba=True)
    out["simulate_ensemble"] = {
        "numba_s": best_of(lambda: simulate_ensemble(cfg, use_numba=True), repeat),
        "numpy_s": best_of(lambda: simulate_ensemble(cfg, use_numba=False), repeat),
    }
    for row in out.values():
        row["speedup"] = row["numpy_s"] / row["numba_s"]
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200, help="repetitions per ensemble")
    ap.add_argument("--steps", type=int, default=10_000, help="samples per repetition")
    ap.add_argument("--repeat", type=int, default=3, help="timing repeats (best is kept)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print machine-readable output")
    args = ap.parse_args(argv)
    res = run(args.reps, args.steps, args.repeat, args.seed)
    if args.json:
        print(json.dumps(res, indent=2))
        return 0
    print(f"{'kernel':<20}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for name, row in res.items():
        print(f"{name:<20}{row['numba_s']:>12.4f}{row['numpy_s']:>12.4f}{row['speedup']:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
