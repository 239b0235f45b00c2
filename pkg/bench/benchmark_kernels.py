#!/usr/bin/env python3
"""Benchmark the SGD step kernels: numba backend vs pure-numpy fallback.

Times the same chunked workload through both implementations (each at a
step count sized to its speed), reports ns/step and the speedup, and
checks that both backends land on the same iterate for a shared prefix.
The numpy path is what PLSGD_BACKEND=numpy selects.
"""

import argparse
import math
import time

import numpy as np

from plsgd import kernels, problems


def _workload(family: str, d: int, n: int, seed: int = 0):
    w_star = tuple(np.ones(d) / math.sqrt(d))
    if family == "sine":
        spec = problems.ProblemSpec(family="sine_link_realizable", dim=d, input_scale=0.8,
                                    w_star=w_star, operating_radius=1.0, link_amplitude=0.5,
                                    pl_probes=16, pl_oracle_samples=2000, m_oracle=2000)
    else:
        spec = problems.ProblemSpec(family="linear_realizable", dim=d, input_scale=math.sqrt(3.0),
                                    w_star=w_star, operating_radius=2.0)
    instance = problems.generate_problem(spec)
    dataset = problems.generate_dataset(instance, n, seed)
    w0 = instance.w_star() + 0.5 * np.ones(d) / math.sqrt(d)
    return instance, dataset, w0


def _run(impl_pair, family, instance, dataset, w0, eta, steps, chunk=1 << 18):
    linear_impl, sine_impl = impl_pair
    X = np.ascontiguousarray(dataset.inputs)
    y = np.ascontiguousarray(dataset.labels)
    w = w0.copy()
    w_star = instance.w_star()
    r2 = instance.spec.operating_radius ** 2
    amp = instance.spec.link_amplitude
    rng = np.random.default_rng(123)
    done = 0
    t0 = time.perf_counter()
    while done < steps:
        idx = rng.integers(0, dataset.n, size=min(chunk, steps - done)).astype(np.int64)
        if family == "sine":
            sine_impl(X, y, w, w_star, eta, amp, idx, r2)
        else:
            linear_impl(X, y, w, w_star, eta, idx, r2)
        done += idx.shape[0]
    return time.perf_counter() - t0, w


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2_000_000,
                        help="steps per timed numba run (numpy gets steps/20)")
    parser.add_argument("--dim", type=int, default=10)
    parser.add_argument("--n", type=int, default=4096)
    args = parser.parse_args()

    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    for family in ("linear", "sine"):
        instance, dataset, w0 = _workload(family, args.dim, args.n)
        eta = 1e-4
        per_step = {}
        agree = {}
        for name in backends:
            impls = kernels.implementations(name)
            steps = args.steps if name == "numba" else max(args.steps // 20, 10_000)
            _run(impls, family, instance, dataset, w0, eta, 10_000)  # warmup / JIT
            elapsed, _ = _run(impls, family, instance, dataset, w0, eta, steps)
            per_step[name] = elapsed / steps * 1e9
            _, agree[name] = _run(impls, family, instance, dataset, w0, eta, 50_000)
            print(f"{family:6s} {name:5s}: {per_step[name]:9.1f} ns/step  ({steps} timed steps)")
        if len(backends) == 2:
            drift = float(np.max(np.abs(agree["numba"] - agree["numpy"])))
            print(f"{family:6s} speedup: {per_step['numpy'] / per_step['numba']:.1f}x, "
                  f"50k-step iterate agreement: max abs diff {drift:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
