"""Compare the numba kernels against their pure-numpy fallbacks.

Both paths are imported directly, so the BNMEM_NUMBA flag does not matter
here. Each kernel is checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from bnmem import kernels, rng


def _time(fn, repeat):
    fn()  # warm-up (and numba compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(size):
    c = np.linspace(0.5, 5.0, size)
    m0 = np.linspace(-3.0, 1.0, size)
    target = m0 + 2.0
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    draws = np.arange(1, 50_001, dtype=np.uint64) * np.uint64(2654435761)
    return {
        "discrete": (lambda f: f(0.0, 1.0, 200_000)),
        "first_crossing": (lambda f: f(m0.copy(), c, target, 100_000)),
        "rk4_time_to": (lambda f: f(c, m0.copy(), target, 1e-3)),
        "rk4_margin_at": (lambda f: f(c, m0.copy(), np.full(size, 5.0), 1e-3)),
        "coupled": (lambda f: f(-2.0, 1.0, 1.0, 3.0, 1.0, 0.5, 0.5, 2.0, 100_000, 100, 1e-9)),
        "xoshiro_fill": (lambda f: _inplace(f, state.copy(), np.empty(1_000_000, dtype=np.uint64))),
        "shuffle": (lambda f: _inplace(f, draws, np.arange(50_000))),
    }


def _inplace(f, a, out):
    f(a, out)
    return out


def pairs():
    p = dict(kernels.KERNEL_PAIRS)
    p["xoshiro_fill"] = (rng._fill_u64_nb, rng._fill_u64_py)
    p["shuffle"] = (rng._shuffle_nb, rng._shuffle_py)
    return p


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    if a.dtype == np.uint64:
        return bool(np.array_equal(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-12, atol=0)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=32, help="problem instances for vectorized kernels")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    work = cases(args.size)
    print(f"{'kernel':<16}{'numba s':>12}{'numpy s':>12}{'speedup':>10}  agree")
    for name, (fast, slow) in pairs().items():
        call = work[name]
        agree = _agree(call(fast), call(slow))
        tf = _time(lambda: call(fast), args.repeat)
        ts = _time(lambda: call(slow), 1)
        print(f"{name:<16}{tf:>12.5f}{ts:>12.5f}{ts / tf:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
