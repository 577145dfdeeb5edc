"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--dtype float32]

Shapes are the ones a desk-preset mesh actually runs: the first and
deepest modules of a G=3 network on a 16x16x8 patch, batch 2, plus one
G=5-sized level. Outputs of the two backends are compared before timing.
"""
import argparse
import timeit

import numpy as np

from zssmnet.nn import backend

CASES = [
    # name, x shape (N, C, Z, Y, X), weight shape (O, C, kz, ky, kx)
    ("m11 1x3x3", (2, 6, 8, 16, 16), (4, 6, 1, 3, 3)),
    ("m22 3x3x3", (2, 8, 8, 8, 8), (8, 8, 3, 3, 3)),
    ("m33 3x3x3", (2, 12, 4, 4, 4), (12, 12, 3, 3, 3)),
    ("g5 level 3x3x3", (1, 32, 8, 32, 32), (48, 32, 3, 3, 3)),
]


def _ops(k, x, w, b):
    y = k.conv3d_forward(x, w, b)
    g = np.ones_like(y)
    return {
        "conv fwd": lambda: k.conv3d_forward(x, w, b),
        "conv dx": lambda: k.conv3d_grad_input(g, w),
        "conv dw": lambda: k.conv3d_grad_weight(x, g, w.shape),
        "pool fwd": lambda: k.maxpool3d_forward(x, (2, 2, 2)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)
    names = backend.available()
    if "compiled" not in names:
        raise SystemExit("compiled kernels are not built; run pip install -e . first")
    py, cy = backend.get("python"), backend.get("compiled")
    rng = np.random.default_rng(0)
    print(f"{'case':<16}{'op':<10}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}")
    for name, xs, ws in CASES:
        x = rng.standard_normal(xs).astype(args.dtype)
        w = rng.standard_normal(ws).astype(args.dtype)
        b = rng.standard_normal(ws[0]).astype(args.dtype)
        ref, got = _ops(py, x, w, b), _ops(cy, x, w, b)
        for op in ref:
            a, c = ref[op](), got[op]()
            a, c = (a[0], c[0]) if isinstance(a, tuple) else (a, c)
            tol = 1e-3 if args.dtype == "float32" else 1e-9
            np.testing.assert_allclose(c, a, rtol=tol, atol=tol * np.abs(a).max())
            t_py = min(timeit.repeat(ref[op], number=1, repeat=args.repeat)) * 1e3
            t_cy = min(timeit.repeat(got[op], number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<16}{op:<10}{t_py:>11.2f}{t_cy:>13.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
