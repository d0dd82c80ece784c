"""Time the compiled kernels against the pure-python fallback.

Runs the two hot entry points, full-dataset loss/gradient and the local
SGD loop, over a grid of task shapes and reports the median wall time per
backend plus the speedup of the compiled path. Results also double as a
sanity check: outputs from the two backends must agree to float64
round-off or the run aborts.
"""

import argparse
import time

import numpy as np

from fedcluster._kernels import get_backends
from fedcluster.tasks import TaskModel, init_params
from fedcluster.core import derive_stream

CASES = [
    ("quadratic", TaskModel("quadratic", feature_dim=32)),
    ("softmax", TaskModel("softmax", feature_dim=64, n_classes=10)),
    ("mlp", TaskModel("mlp", feature_dim=32, n_classes=10, hidden=32)),
]


def make_inputs(task, n_samples, steps, batch, seed):
    gen = derive_stream(seed, ("bench", task.kind)).gen
    x = gen.normal(size=(n_samples, task.feature_dim))
    if task.kind == "quadratic":
        y = np.zeros(n_samples, dtype=np.int64)
    else:
        y = gen.integers(0, task.n_classes, size=n_samples, dtype=np.int64)
    w0 = init_params(task, derive_stream(seed, ("bench", "w0")))
    lrs = np.full(steps, 0.01)
    idx = gen.integers(0, n_samples, size=(steps, batch), dtype=np.int64)
    return x, y, w0, lrs, idx


def median_time(fn, repeats):
    # one warm-up call, then time each repeat separately
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=512, help="dataset rows per case")
    ap.add_argument("--steps", type=int, default=200, help="local SGD steps per case")
    ap.add_argument("--batch", type=int, default=8, help="minibatch size")
    ap.add_argument("--repeats", type=int, default=7, help="timed repeats per cell")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = get_backends()
    names = [n for n, _ in backends]
    if len(backends) < 2:
        print("note: compiled extension unavailable, timing %s only" % names[0])

    header = f"{'case':<22}" + "".join(f"{n:>12}" for n in names)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for kind, task in CASES:
        x, y, w0, lrs, idx = make_inputs(task, args.samples, args.steps, args.batch, args.seed)
        for label, call in [
            ("loss_grad", lambda mod: mod.dataset_loss_grad(
                task.kind_id, task.n_classes, task.hidden, x, y, w0)),
            ("local_sgd", lambda mod: mod.local_sgd(
                task.kind_id, task.n_classes, task.hidden, x, y, w0, lrs, idx,
                0, 0.0, 0.9, 0.999, 1e-8, 0.0)),
        ]:
            outs = [call(mod) for _, mod in backends]
            for other in outs[1:]:
                for a, b in zip(outs[0], other):
                    if not np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-12):
                        raise SystemExit(f"backend outputs disagree on {kind}/{label}")
            row = f"{kind + ' ' + label:<22}"
            secs = []
            for _, mod in backends:
                secs.append(median_time(lambda m=mod: call(m), args.repeats))
                row += f"{secs[-1] * 1e3:>10.2f}ms"
            if len(secs) == 2:
                row += f"{secs[0] / secs[1]:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
