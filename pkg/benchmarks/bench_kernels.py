"""Compare the numba and numpy depthwise 3x3 kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are timed in one process (the env flag only picks the default
binding), after one untimed call so numba compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from ifnas import kernels

SHAPES = [(32, 16, 32, 32), (32, 32, 16, 16), (32, 64, 8, 8), (8, 8, 4, 4)]
OPS = {
    "forward": ("depthwise3x3", lambda x, w, g: (x, w)),
    "grad_input": ("depthwise3x3_grad_input", lambda x, w, g: (g, w)),
    "grad_weight": ("depthwise3x3_grad_weight", lambda x, w, g: (x, g)),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'shape':>18} {'op':>12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>9}")
    for shape in SHAPES:
        x = rng.normal(size=shape)
        g = rng.normal(size=shape)
        w = rng.normal(size=(shape[1], 3, 3))
        for op, (name, pick) in OPS.items():
            a = pick(x, w, g)
            f_np = getattr(kernels, name + "_numpy")
            f_nb = getattr(kernels, name + "_numba")
            diff = float(np.max(np.abs(f_np(*a) - f_nb(*a))))
            t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
            t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
            print(f"{str(shape):>18} {op:>12} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f} {diff:9.1e}")


if __name__ == "__main__":
    main()
