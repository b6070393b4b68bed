"""Compare the compiled and pure-Python training engines.

    python benchmarks/bench_backends.py [--repeat 5] [--samples 180]

Times ``train_epochs`` on one client-sized workload (hard labels only, then
with distillation targets) and checks that both engines end on the same
parameters.
"""
import argparse
import statistics
import time

import numpy as np

from persfl import nn
from persfl.nn.tensor import softmax_rows


def workload(samples, dim, hidden, classes, seed=0):
    rng = np.random.default_rng(seed)
    params = nn.init_params([dim, hidden, classes], rng)
    X = rng.normal(size=(samples, dim))
    y = rng.integers(0, classes, size=samples)
    soft = softmax_rows(rng.normal(size=(samples, classes)), 4.0)
    return params, X, y, soft


def timed(engine, params, X, y, soft, args):
    kw = {}
    if soft is not None:
        kw = dict(soft_targets=soft, hard_weight=0.5, soft_weight=0.5 * 16, T=4.0)
    times, out = [], None
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        out = nn.train_epochs(params, X, y, eta=0.05, batch_size=args.batch, epochs=args.epochs,
                              rng=np.random.default_rng(1), backend=engine, **kw)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--samples", type=int, default=180)
    ap.add_argument("--dim", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=100)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()

    engines = nn.available_backends()
    if "compiled" not in engines:
        print("compiled engine not built; only the python engine is available")
    params, X, y, soft = workload(args.samples, args.dim, args.hidden, args.classes)
    print(f"{args.samples} samples, {args.dim}-{args.hidden}-{args.classes} MLP, "
          f"batch {args.batch}, {args.epochs} epochs, median of {args.repeat}")
    print(f"{'objective':<10}{'engine':<10}{'seconds':>10}{'speedup':>10}{'max |diff|':>12}")
    for label, targets in (("hard", None), ("distill", soft)):
        results = {e: timed(e, params, X, y, targets, args) for e in engines}
        base_time, base_out = results["python"]
        for engine, (secs, out) in results.items():
            print(f"{label:<10}{engine:<10}{secs:>10.4f}{base_time / secs:>9.1f}x"
                  f"{out.max_abs_diff(base_out):>12.1e}")


if __name__ == "__main__":
    main()
