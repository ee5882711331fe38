"""Compare the NumPy and numba kernel backends.

Micro-benchmarks every hot kernel at training-like shapes, checking that
both implementations agree numerically, then (optionally) times a full
cross-validated run under each backend via subprocess, since the backend
is fixed per process at import time.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 50 --skip-e2e
"""

import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from emofuse.kernels import numpy_impl

try:
    from emofuse.kernels import numba_impl
except ImportError:
    numba_impl = None


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def _cases(batch):
    rng = np.random.default_rng(0)
    d_a, d_h, d_out, n_cls = 64, 128, 256, 6

    x = rng.standard_normal((batch, d_a))
    w_down = rng.standard_normal((d_a, d_a // 2)) * 0.1
    b_down = rng.standard_normal(d_a // 2) * 0.1
    w_up = rng.standard_normal((d_a // 2, d_a)) * 0.1
    b_up = rng.standard_normal(d_a) * 0.1
    _, z1a, z2a = numpy_impl.adapter_forward(x, w_down, b_down, w_up, b_up)
    dy = rng.standard_normal((batch, d_a))

    xm = rng.standard_normal((batch, d_a))
    w1 = rng.standard_normal((d_a, d_h)) * 0.1
    b1 = rng.standard_normal(d_h) * 0.1
    w2 = rng.standard_normal((d_h, d_out)) * 0.1
    b2 = rng.standard_normal(d_out) * 0.1
    _, z1m, z2m = numpy_impl.mlp2_forward(xm, w1, b1, w2, b2, False)
    dym = rng.standard_normal((batch, d_out))

    logits = rng.standard_normal((batch, n_cls))
    labels = rng.integers(0, n_cls, size=batch)

    p = rng.standard_normal(d_a * d_h)
    g = rng.standard_normal(d_a * d_h)

    return [
        ("adapter_forward", (x, w_down, b_down, w_up, b_up)),
        ("adapter_backward", (dy, x, z1a, z2a, w_down, w_up)),
        ("mlp2_forward", (xm, w1, b1, w2, b2, False)),
        ("mlp2_backward", (dym, xm, z1m, z2m, w1, w2, False)),
        ("softmax_rows", (logits,)),
        ("softmax_xent", (logits, labels)),
        ("adam_update", (p, g, np.zeros_like(p), np.zeros_like(p),
                         1, 1e-4, 0.9, 0.999, 1e-8, 0.02, False)),
    ]


def _fresh_args(name, args):
    # adam_update mutates its arrays; hand each call its own copies
    if name == "adam_update":
        p, g, m, v, *rest = args
        return (p.copy(), g, m.copy(), v.copy(), *rest)
    return args


def micro(batch, repeats):
    print(f"\nkernel micro-benchmarks  batch={batch}  repeats={repeats}  (best of runs, ms)")
    header = f"{'kernel':<18} {'numpy':>9} {'numba':>9} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for name, args in _cases(batch):
        np_fn = getattr(numpy_impl, name)
        t_np = _time(lambda *a: np_fn(*_fresh_args(name, a)), args, repeats) * 1e3
        if numba_impl is None:
            print(f"{name:<18} {t_np:>9.4f} {'n/a':>9} {'n/a':>8} {'n/a':>10}")
            continue
        nb_fn = getattr(numba_impl, name)
        nb_fn(*_fresh_args(name, args))  # JIT warmup outside the timed region
        t_nb = _time(lambda *a: nb_fn(*_fresh_args(name, a)), args, repeats) * 1e3

        ref = np_fn(*_fresh_args(name, args))
        got = nb_fn(*_fresh_args(name, args))
        if name == "adam_update":
            pr, gr = _fresh_args(name, args)[:2]
            pn, mn, vn = pr.copy(), np.zeros_like(pr), np.zeros_like(pr)
            numpy_impl.adam_update(pn, gr, mn, vn, *args[4:])
            pb, mb, vb = pr.copy(), np.zeros_like(pr), np.zeros_like(pr)
            numba_impl.adam_update(pb, gr, mb, vb, *args[4:])
            diff = _max_diff((pn, mn, vn), (pb, mb, vb))
        else:
            diff = _max_diff(ref, got)
        print(f"{name:<18} {t_np:>9.4f} {t_nb:>9.4f} {t_np / t_nb:>7.2f}x {diff:>10.2e}")


def end_to_end():
    print("\nend-to-end: 2-fold cross-validated run per backend (wall seconds)")
    with tempfile.TemporaryDirectory() as tmp:
        store = os.path.join(tmp, "bench.emof")
        gen = [sys.executable, "-m", "emofuse.cli", "gen-data", "--out", store,
               "--n-samples", "240", "--n-unlabeled", "400", "--n-test", "60"]
        subprocess.run(gen, check=True, capture_output=True)
        for backend, flag in (("numpy", "0"), ("numba", "1")):
            if backend == "numba" and numba_impl is None:
                print(f"  {backend:<6} unavailable")
                continue
            env = dict(os.environ, EMOFUSE_NUMBA=flag)
            cmd = [sys.executable, "-m", "emofuse.cli", "cv", "--store", store,
                   "--out", os.path.join(tmp, f"run_{backend}"), "--folds", "2",
                   "--epochs", "10", "--align-epochs", "10", "--align-batch", "400",
                   "--fusion-epochs", "10"]
            t0 = time.perf_counter()
            subprocess.run(cmd, check=True, capture_output=True, env=env)
            print(f"  {backend:<6} {time.perf_counter() - t0:.2f}s")
        a = open(os.path.join(tmp, "run_numpy", "metrics.tsv"), "rb").read()
        b_path = os.path.join(tmp, "run_numba", "metrics.tsv")
        if os.path.exists(b_path):
            b = open(b_path, "rb").read()
            print(f"  metrics files identical: {a == b}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if numba_impl is None:
        print("numba backend not importable; timing NumPy only")
    micro(args.batch, args.repeats)
    micro(16, args.repeats)  # training minibatch shape
    if not args.skip_e2e:
        end_to_end()


if __name__ == "__main__":
    main()
