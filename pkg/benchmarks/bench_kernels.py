"""Compare the compiled and numpy backends on the hot kernels.

Shapes follow a 2-layer network at grid level 3: a rho0+rho1 stencil with
20 response rows and a regular nonlinearity with N = 101 samples.

    python benchmarks/bench_kernels.py --level 3 --batch 32 --repeat 5
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gevnet import kernels
from gevnet.geometry import sampling_phases
from gevnet.network import GeometryContext, sample_matrices
from gevnet.steerable import RHO01


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--N", type=int, default=101)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    dtype = np.dtype(args.dtype)
    conv = GeometryContext(1000).conv_stencil(args.level, RHO01)
    kt, nbr = conv.kt.astype(dtype), conv.nbr
    V, _, R, D = kt.shape
    B, C = args.batch, args.channels
    x = rng.standard_normal((B, V, C, D)).astype(dtype)
    gz = rng.standard_normal((B, V, C, R)).astype(dtype)
    S, _ = sample_matrices(args.N, sampling_phases(args.level), V, dtype)
    cs, sn = np.ascontiguousarray(S[..., 1]), np.ascontiguousarray(S[..., 2])
    W = 2 * C
    a = rng.standard_normal((B, V, W, 3)).astype(dtype)
    gd = rng.standard_normal((B, V, W, 3)).astype(dtype)
    c0, c1, mu = (rng.standard_normal(W).astype(dtype) for _ in range(3))

    cases = {
        "stencil_forward": lambda b: kernels.stencil_forward(kt, nbr, x, backend=b),
        "stencil_adjoint": lambda b: kernels.stencil_adjoint(kt, nbr, gz, V, backend=b),
        "nl_forward": lambda b: kernels.nl_forward(a, cs, sn, backend=b),
        "nl_backward": lambda b: kernels.nl_backward(a, cs, sn, gd, c0, c1, mu, backend=b),
    }
    backends = kernels.available_backends()
    print(f"level {args.level}, V={V}, batch {B}, channels {C}, N={args.N}, {args.dtype}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        ref = fn("numpy")
        ref = ref if isinstance(ref, tuple) else (ref,)
        times = []
        for b in backends:
            got = fn(b)
            got = got if isinstance(got, tuple) else (got,)
            for u, w in zip(ref, got):
                np.testing.assert_allclose(w, u, rtol=1e-5 if dtype == np.float32 else 1e-10, atol=1e-6)
            times.append(best_of(lambda: fn(b), args.repeat))
        row = f"{name:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[1] / times[0]:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
