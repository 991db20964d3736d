"""Compare the compiled and numpy forward/backward kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--length 9000] [--states 7] [--repeat 5]

Prints the best wall time per kernel and backend, the speed-up of the
compiled kernels, and the largest difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from gbm import kernels


def _inputs(T, Z, seed):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(Z))
    omega = rng.dirichlet(np.ones(Z), size=Z)
    emis = rng.random((T, Z)) + 1e-3
    emis /= emis.max(axis=1, keepdims=True)
    return pi, omega, np.ascontiguousarray(emis)


def bench(T, Z, repeat, seed=0):
    pi, omega, emis = _inputs(T, Z, seed)
    rows = {}
    outputs = {}
    for name in kernels.available_backends():
        impl = kernels.get_backend(name)
        fhat, scale, _ = impl.forward(pi, omega, emis)
        outputs[name] = (fhat, impl.backward(omega, emis, scale))
        calls = {
            "forward": lambda: impl.forward(pi, omega, emis),
            "backward": lambda: impl.backward(omega, emis, scale),
            "forward_loglik": lambda: impl.forward_loglik(pi, omega, emis),
        }
        rows[name] = {k: min(timeit.repeat(f, number=1, repeat=repeat)) for k, f in calls.items()}
    return rows, outputs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=9000)
    ap.add_argument("--states", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rows, outputs = bench(args.length, args.states, args.repeat)
    print(f"T={args.length} Z={args.states} best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in rows))
    for kernel in ("forward", "backward", "forward_loglik"):
        line = f"{kernel:<16}" + "".join(f"{rows[b][kernel] * 1e3:>10.2f}ms" for b in rows)
        if "cython" in rows:
            line += f"   x{rows['python'][kernel] / rows['cython'][kernel]:.1f}"
        print(line)
    if "cython" in outputs:
        diff = max(np.max(np.abs(a - b)) for a, b in zip(outputs["cython"], outputs["python"]))
        print(f"max |cython - python| = {diff:.2e}")
    else:
        print("compiled kernels not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
