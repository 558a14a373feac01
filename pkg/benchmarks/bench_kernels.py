"""Time the numba and pure-numpy kernel paths on realistic sizes.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is warmed up once (so numba compile time is excluded) and the
best of ``--repeat`` runs is reported. Outputs of the two paths are checked
for agreement before timing.
"""

import argparse
import time

import numpy as np

from reefdrop import _kernels


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    probs = rng.dirichlet(np.ones(3), size=(5000, 28))
    preds, truths = rng.integers(0, 3, 200_000), rng.integers(0, 3, 200_000)
    scores, tb = rng.uniform(size=20_000), rng.uniform(size=20_000) < 0.4
    alphas = np.linspace(0, 1, 101)
    logits, labels = rng.normal(size=(4096, 3)), rng.integers(0, 3, 4096)
    weights = np.array([1.2, 12.0, 12.0])
    return {
        "grid_class_counts 5000x28": lambda k: k.grid_class_counts(probs),
        "confusion_tally 200k": lambda k: k.confusion_tally(preds, truths, 3),
        "sweep_tally 20k x 101": lambda k: k.sweep_tally(scores, tb, alphas),
        "focal_loss_grad 4096x3": lambda k: k.focal_loss_grad(logits, labels, weights, 2.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; only the numpy path is available")
    impls = {"numpy": _kernels.numpy_impl, "numba": _kernels.numba_impl}
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(np.random.default_rng(args.seed)).items():
        a, b = call(impls["numpy"]), call(impls["numba"])
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-15)
        t_np = _best(lambda: call(impls["numpy"]), args.repeat)
        t_nb = _best(lambda: call(impls["numba"]), args.repeat)
        print(f"{name:<28}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
