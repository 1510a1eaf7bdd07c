"""Time the numba kernels against the pure-numpy fallback.

Both backends are imported directly, so the result does not depend on
USTEX_DISABLE_NUMBA. Each kernel runs once untimed (JIT compile) and the
outputs of the two backends are checked against each other before timing.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 128]
"""
import argparse
import timeit

import numpy as np

from ustex.kernels import _numba, _numpy, gaussian_taps


def _cases(size: int, rng: np.random.Generator) -> dict:
    img = rng.uniform(-1, 1, size=(size, size))
    n, d = 400, 64
    x = rng.normal(size=(n, d))
    y = np.where(x[:, 0] + 0.3 * rng.normal(size=n) > 0, 1.0, -1.0)
    scores = rng.normal(size=20000)
    labels = (rng.uniform(size=20000) < 0.3).astype(np.float64)
    return {
        "sparsemax_rows": (np.ascontiguousarray(rng.normal(size=(size * size, 5))),),
        "blur_separable": (img, gaussian_taps(1.5)),
        "crop_resize_bilinear": (img, 5, 7, size // 2, size // 2 + 3, size, size),
        "rotate_bilinear": (img, 17.0, -1.0),
        "svm_dual_cd": (x, y, np.full(n, 1.0), rng.permutation(n), np.zeros(n), 1e-6, 2000),
        "rank_auc": (scores, labels),
    }


def _cold_svm(kernel):
    def run(x, y, upper, order, alpha, tol, max_epochs):
        return kernel(x, y, upper, order, alpha.copy(), tol, max_epochs)

    return run


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-7, atol=1e-9)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args(argv)

    cases = _cases(args.size, np.random.default_rng(0))
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  match")
    for name, call_args in cases.items():
        fast, slow = getattr(_numba, name), getattr(_numpy, name)
        if name == "svm_dual_cd":  # the warm-start argument is updated in place
            fast, slow = _cold_svm(fast), _cold_svm(slow)
        ok = _same(fast(*call_args), slow(*call_args))  # first call also compiles
        t_np = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<22} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
