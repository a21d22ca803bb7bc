"""Time the compiled and numpy kernel backends on representative shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Prints one line per kernel and shape with the median time of each backend
and the speed ratio.  Runs the numpy backend only if the extension is absent.
"""
import argparse
import json
import statistics
import time

import numpy as np

from particle_smoothing import _pykernels, kernels


def cases(rng):
    k, T = 8, 40
    lt = np.log(rng.dirichlet(np.ones(k), size=k))
    le = np.log(rng.random((T, k)))
    exy = np.log(rng.random((T, 3, k)))
    paths = rng.integers(0, 3, size=(256, T))
    yield "logsumexp_rows 1000x64", "logsumexp_rows", (rng.normal(size=(1000, 64)),)
    yield f"oohmm_forward k={k} T={T}", "oohmm_forward", (lt, le, 0)
    yield f"oohmm_backward k={k} T={T}", "oohmm_backward", (lt, le)
    yield f"oohmm_score_paths N=256 T={T}", "oohmm_score_paths", (lt, exy, paths, 0)
    for n in (32, 576):
        x, h = rng.normal(size=(n, 16)), rng.normal(size=(n, 32))
        W, U, b = rng.normal(size=(16, 96)), rng.normal(size=(32, 96)), rng.normal(size=96)
        yield f"gru_forward N={n}", "gru_forward", (x, h, W, U, b)
        fwd = _pykernels.gru_forward(x, h, W, U, b)
        yield f"gru_backward N={n}", "gru_backward", (rng.normal(size=(n, 32)), x, h, W, U) + fwd[1:]
    for M, Y in ((32, 18), (128, 30)):
        h = rng.normal(size=(M, 32))
        yield f"gru_expand M={M} Y={Y}", "gru_expand", (rng.normal(size=(Y, 96)), rng.normal(size=(M, 96)), h)
    w = rng.random(128)
    yield "cumulative_inversion 128x128", "cumulative_inversion", (w / w.sum(), rng.random(128))


def median_ms(fn, args, repeat):
    fn(*args)
    n, t0 = 0, time.perf_counter()
    while time.perf_counter() - t0 < 0.02:
        fn(*args)
        n += 1
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(n):
            fn(*args)
        times.append((time.perf_counter() - t0) / n * 1e3)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    compiled = kernels.compiled_backend
    rows = []
    print(f"{'kernel':34s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, name, a in cases(rng):
        py = median_ms(getattr(_pykernels, name), a, args.repeat)
        cy = median_ms(getattr(compiled, name), a, args.repeat) if compiled else float("nan")
        rows.append({"case": label, "numpy_ms": py, "compiled_ms": cy})
        print(f"{label:34s} {py:10.4f} {cy:12.4f} {py / cy:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
