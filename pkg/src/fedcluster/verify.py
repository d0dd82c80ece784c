"""Self-contained property battery behind the `verify` CLI command.

Each property is a named check over a small fixture. The battery returns
structured results so the CLI can emit machine-readable JSON and a nonzero
exit code on any failure. The `inject` argument deliberately corrupts one
oracle (used to prove the battery can fail); see _INJECTIONS.
"""

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import bounds, clustering, engine, fedsets, tasks
from .core import derive_stream, sq_norm, weighted_sum
from .errors import ConfigurationError, IngestionError

_INJECTIONS = ("quad-grad-sign",)


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _result(name, passed, detail=""):
    return PropertyResult(name=name, passed=bool(passed), detail=detail)


def _random_quad_federation(gen, n_dev=6, dim=3):
    data = []
    for k in range(n_dev):
        m = int(gen.integers(1, 5))
        data.append((gen.normal(size=(m, dim)), np.zeros(m, dtype=np.int64), 0))
    weights = gen.uniform(0.5, 2.0, size=n_dev)
    weights = weights / weights.sum()
    # renormalize exactly so the federation validator accepts
    weights[-1] = 1.0 - float(weights[:-1].sum())
    return tasks.TaskModel(kind="quadratic", feature_dim=dim), fedsets.build_federation(
        [d for d in data], weights=weights
    )


def _small_run_cfg(seed=7, M=2, T=6, participation=1.0, threads=None):
    gen = np.random.default_rng(123)
    data = []
    for k in range(4):
        X = gen.normal(size=(5, 3)) + k
        data.append((X, np.zeros(5, dtype=np.int64), 0))
    fed = fedsets.build_federation(data)
    task = tasks.TaskModel(kind="quadratic", feature_dim=3)
    clus = clustering.cluster_random_uniform(fed, M, seed)
    return engine.RunConfig(
        task=task, fed=fed, clustering=clus, T=T, E=4,
        schedule=engine.constant_lr(0.05),
        optimizer=engine.LocalOptimizerSpec(kind="sgd", batch_size=2),
        participation=participation, seed=seed, threads=threads,
    )


def _logs_equal(a, b):
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (ra.train_loss, ra.grad_sq_norm, ra.lr) != (rb.train_loss, rb.grad_sq_norm, rb.lr):
            return False
    return bool(np.array_equal(a.final_params, b.final_params))


def _check_rng_replay():
    gen = np.random.default_rng(0)
    for _ in range(300):
        seed = int(gen.integers(0, 2 ** 63))
        path = ("round", int(gen.integers(0, 100)), "dev", int(gen.integers(0, 100)))
        a = derive_stream(seed, path).gen.random(50)
        b = derive_stream(seed, path).gen.random(50)
        if not np.array_equal(a, b):
            return False, f"replay mismatch at seed={seed} path={path}"
    return True, "300 (seed, path) pairs replayed identically"


def _check_rng_distinct():
    base = derive_stream(42, ("round", 0, "dev", 3)).gen.random(10)
    sib = derive_stream(42, ("round", 0, "dev", 4)).gen.random(10)
    other = derive_stream(43, ("round", 0, "dev", 3)).gen.random(10)
    ok = not np.array_equal(base, sib) and not np.array_equal(base, other)
    return ok, "sibling paths and different seeds produce different draws"


def _check_weighted_sum():
    v = np.array([1.5, -2.25, 8.0])
    same = weighted_sum([v, v, v], [0.25, 0.5, 0.25])
    if not np.array_equal(same, v):
        return False, "convex combination of identical vectors is not exact"
    got = weighted_sum([np.array([1.0]), np.array([2.0])], [0.4, 0.6])
    if abs(got[0] - 1.6) > 1e-12:
        return False, f"hand-computed case gives {got[0]}"
    return True, "identity and hand cases hold"


def _check_weighted_sum_parallel():
    gen = np.random.default_rng(5)
    vecs = [gen.normal(size=64) for _ in range(9)]
    wts = gen.uniform(0.1, 1.0, size=9)
    serial = weighted_sum(vecs, wts)
    with ThreadPoolExecutor(max_workers=4) as pool:
        futs = [pool.submit(lambda v: v.copy(), v) for v in vecs]
        gathered = [f.result() for f in futs]
    parallel = weighted_sum(gathered, wts)
    ok = np.array_equal(serial, parallel)
    return ok, "reduction over pool-produced vectors is bit-identical"


def _all_tasks():
    gen = np.random.default_rng(11)
    specs = [
        tasks.TaskModel(kind="quadratic", feature_dim=4),
        tasks.TaskModel(kind="softmax", feature_dim=5, n_classes=3),
        tasks.TaskModel(kind="mlp", feature_dim=4, n_classes=3, hidden=6),
    ]
    return gen, specs


def _check_grad_fd(inject=None):
    gen, specs = _all_tasks()
    step = 1e-5
    worst = 0.0
    for task in specs:
        for _ in range(30):
            w = gen.normal(size=task.param_dim)
            xi = tasks.Sample(gen.normal(size=task.feature_dim),
                              int(gen.integers(0, max(task.n_classes, 1))))
            g = tasks.sample_grad(task, w, xi)
            if inject == "quad-grad-sign" and task.kind == "quadratic":
                g = -g
            fd = np.empty_like(g)
            for i in range(w.shape[0]):
                wp, wm = w.copy(), w.copy()
                wp[i] += step
                wm[i] -= step
                fd[i] = (tasks.sample_loss(task, wp, xi)
                         - tasks.sample_loss(task, wm, xi)) / (2 * step)
            denom = max(np.linalg.norm(fd), 1e-8)
            rel = float(np.linalg.norm(g - fd)) / denom
            worst = max(worst, rel)
            if rel > 1e-6:
                return False, f"{task.kind}: rel err {rel:.2e} vs finite differences"
    return True, f"3 kinds x 30 points, worst rel err {worst:.2e}"


def _check_losses_bounded():
    gen, specs = _all_tasks()
    for task in specs:
        for _ in range(50):
            w = gen.normal(size=task.param_dim) * 3
            xi = tasks.Sample(gen.normal(size=task.feature_dim),
                              int(gen.integers(0, max(task.n_classes, 1))))
            if tasks.sample_loss(task, w, xi) < 0:
                return False, f"{task.kind}: negative loss"
    return True, "all task losses nonnegative at 50 random points each"


def _check_quad_analytic():
    gen = np.random.default_rng(21)
    task, fed = _random_quad_federation(gen)
    sol = tasks.quadratic_analytic(task, fed)
    for _ in range(20):
        w = gen.normal(size=task.feature_dim) * 2
        f_w, _ = engine.global_loss_grad(task, fed, w)
        gap = f_w - sol.f_star
        expect = 0.5 * sq_norm(w - sol.w_star)
        if abs(gap - expect) > 1e-10:
            return False, f"loss gap {gap} vs closed form {expect}"
    return True, "global loss matches 0.5*||w - w*||^2 + f* at 20 probes"


def _check_partition():
    pool = fedsets.synth_pool(4, 3, 40, 2.0, seed=9)
    cfg = fedsets.PartitionConfig(n=8, samples_per_device=20, rho_device=0.55, seed=9)
    fed_a = fedsets.partition(pool, cfg)
    fed_b = fedsets.partition(pool, cfg)
    if abs(float(fed_a.p.sum()) - 1.0) > 1e-12:
        return False, "device weights do not sum to 1"
    want_major = int(np.floor(0.55 * 20 + 0.5))
    for dev in fed_a.devices:
        if int((dev.y == dev.major_class).sum()) != want_major:
            return False, f"device {dev.device_id}: major-class count off"
    same = all(np.array_equal(a.X, b.X) for a, b in zip(fed_a.devices, fed_b.devices))
    return same, "weights sum to 1, major fraction exact, construction deterministic"


def _check_clusterings():
    pool = fedsets.synth_pool(4, 3, 40, 2.0, seed=9)
    fed = fedsets.partition(pool, fedsets.PartitionConfig(8, 20, 0.7, seed=9))
    for clus in (
        clustering.cluster_random_uniform(fed, 4, seed=3),
        clustering.cluster_major_class(fed, 4, 0.5, seed=3),
        clustering.cluster_singleton(fed),
    ):
        counts = np.bincount(clus.assignment, minlength=clus.M)
        if counts.sum() != fed.n or (counts == 0).any():
            return False, "assignment is not a partition"
        if abs(float(clus.q.sum()) - 1.0) > 1e-9:
            return False, "cluster weights do not sum to 1"
    return True, "all strategies produce valid weighted partitions"


def _check_h_gamma_ordering():
    gen = np.random.default_rng(31)
    for trial in range(15):
        task, fed = _random_quad_federation(gen)
        M = int(gen.choice([1, 2, 3]))
        if fed.n % M:
            M = 1
        assignment = gen.integers(0, M, size=fed.n)
        assignment[:M] = np.arange(M)  # keep every cluster non-empty
        clus = clustering.make_clustering(fed, assignment, M)
        probes = [gen.normal(size=task.feature_dim) for _ in range(3)]
        rep = clustering.estimate_H(task, fed, clus, probes)
        gd, gc = clustering.estimate_Gamma(task, fed, clus)
        if rep.H_cluster_hat > rep.H_device_hat + 1e-9:
            return False, f"trial {trial}: H_cluster > H_device"
        if gc > gd + 1e-12:
            return False, f"trial {trial}: Gamma_cluster > Gamma_device"
        if M == 1 and (abs(rep.H_cluster_hat) > 1e-18 or abs(gc) > 1e-12):
            return False, f"trial {trial}: single cluster should zero both"
    return True, "grouping never increases H or Gamma over 15 random cases"


def _check_schedules():
    sch = engine.constant_theory(T=100, M=10, E=20)
    if abs(engine.lr_value(sch, 0, 0, 0) - 20000 ** -0.5) > 1e-15:
        return False, "constant theory rate off"
    inv = engine.inverse_time(mu=1.0, L=1.0, M=10, E=20)
    if abs(engine.lr_value(inv, 0, 0, 0) - 0.01) > 1e-15:
        return False, "inverse-time rate off at step 0"
    gen = np.random.default_rng(2)
    for _ in range(200):
        j, K, t = int(gen.integers(0, 50)), int(gen.integers(0, 10)), int(gen.integers(0, 19))
        here = engine.lr_value(inv, j, K, t)
        there = engine.lr_value(inv, j, K, t + 1)
        if there > here:
            return False, "inverse-time schedule increased"
    return True, "closed-form values and monotonicity hold"


def _check_local_train_closed_form():
    c = np.array([1.5, -2.0])
    dev = fedsets.DeviceDataset(device_id=0, X=c[None, :], y=np.array([0]),
                                major_class=0, p_k=1.0)
    task = tasks.TaskModel(kind="quadratic", feature_dim=2)
    w0 = np.array([4.0, 4.0])
    eta, E = 0.1, 12
    rng = derive_stream(0, ("check",))
    out = engine.local_train(task, dev, w0, E, engine.constant_lr(eta), 0, 0,
                             engine.LocalOptimizerSpec(kind="sgd", batch_size=1), rng)
    want = c + (1 - eta) ** E * (w0 - c)
    if np.abs(out - want).max() > 1e-10:
        return False, "plain local steps deviate from the linear recursion"
    out = engine.local_train(task, dev, w0, 500, engine.constant_lr(0.05), 0, 0,
                             engine.LocalOptimizerSpec(kind="fedprox", batch_size=1,
                                                       mu_prox=0.3),
                             derive_stream(1, ("check",)))
    want = (c + 0.3 * w0) / 1.3
    if np.abs(out - want).max() > 1e-6:
        return False, "proximal steps miss their fixed point"
    return True, "contraction and proximal fixed point match closed forms"


def _check_plan_round():
    cfg = _small_run_cfg(M=2)
    plan = engine.plan_round(3, cfg.clustering, 0.5, True, cfg.seed)
    if sorted(plan.sigma.tolist()) != [0, 1]:
        return False, "sigma is not a permutation"
    for K in range(2):
        members = set(cfg.clustering.members(int(plan.sigma[K])).tolist())
        if not set(plan.sampled[K].tolist()) <= members:
            return False, "sampled device outside its cluster"
    again = engine.plan_round(3, cfg.clustering, 0.5, True, cfg.seed)
    same = np.array_equal(plan.sigma, again.sigma) and all(
        np.array_equal(a, b) for a, b in zip(plan.sampled, again.sampled))
    return same, "permutation valid, samples in-cluster, plan deterministic"


def _check_m1_equivalence():
    cfg = _small_run_cfg(M=1, participation=0.5)
    log_a = engine.run(cfg)
    log_b = engine.run_fedavg(cfg)
    return _logs_equal(log_a, log_b), "single-cluster run equals the fedavg path bit for bit"


def _check_rerun_determinism():
    cfg = _small_run_cfg(M=2)
    return _logs_equal(engine.run(cfg), engine.run(cfg)), "same config twice, same log"


def _check_thread_invariance():
    one = engine.run(_small_run_cfg(M=2, threads=1))
    four = engine.run(_small_run_cfg(M=2, threads=4))
    return _logs_equal(one, four), "1 vs 4 worker threads, same log"


def _check_unbiased_average():
    gen = np.random.default_rng(17)
    data = [(gen.normal(size=(4, 1)) + k, np.zeros(4, dtype=np.int64), 0)
            for k in range(3)]
    fed = fedsets.build_federation(data)
    task = tasks.TaskModel(kind="quadratic", feature_dim=1)
    clus = clustering.cluster_random_uniform(fed, 1, seed=0)
    w = np.array([0.7])
    _, want = engine.global_loss_grad(task, fed, w)
    draws = np.empty(4000)
    for i in range(4000):
        acc = 0.0
        for dev in fed.devices:
            r = int(gen.integers(0, dev.n))
            xi = tasks.Sample(dev.X[r], int(dev.y[r]))
            acc += (dev.p_k / clus.q[0]) * float(tasks.sample_grad(task, w, xi)[0])
        draws[i] = acc
    se = draws.std(ddof=1) / np.sqrt(draws.shape[0])
    err = abs(draws.mean() - want[0])
    ok = err <= max(3 * se, 1e-12)
    return ok, f"sampled average within {err:.2e} of the weighted gradient (3se={3 * se:.2e})"


def _check_bound_monotone():
    gen = np.random.default_rng(41)
    for _ in range(20):
        n, M = 6, 2
        p = np.full(n, 1.0 / n)
        assignment = np.array([0, 0, 0, 1, 1, 1])
        q = np.array([0.5, 0.5])
        base = bounds.BoundInputs(
            L=float(gen.uniform(0.5, 2)), G=float(gen.uniform(0.5, 3)),
            s_sq=gen.uniform(0, 1, size=n), H_cluster=float(gen.uniform(0, 2)),
            f0_gap=float(gen.uniform(0, 4)), T=int(gen.integers(10, 100)),
            M=M, E=int(gen.integers(1, 30)), p=p, q=q, assignment=assignment,
            mu=0.3, Gamma_cluster=float(gen.uniform(0, 1)),
        )
        more_t = replace(base, T=base.T * 2)
        more_m = replace(base, M=base.M * 2)
        if bounds.bound_nonconvex(more_t)[1] > bounds.bound_nonconvex(base)[1] + 1e-12:
            return False, "nonconvex bound grew with T"
        if bounds.bound_nonconvex(more_m)[1] > bounds.bound_nonconvex(base)[1] + 1e-12:
            return False, "nonconvex bound grew with M"
        if bounds.bound_strongly_convex(more_t)[2] > bounds.bound_strongly_convex(base)[2] + 1e-12:
            return False, "strongly convex bound grew with T"
        if bounds.bound_strongly_convex(more_m)[2] > bounds.bound_strongly_convex(base)[2] + 1e-12:
            return False, "strongly convex bound grew with M"
    return True, "both bounds nonincreasing in T and M over 20 random inputs"


def _check_activation_budget():
    cfg = _small_run_cfg(M=2, participation=0.5, T=4)
    for j in range(cfg.T):
        plan = engine.plan_round(j, cfg.clustering, cfg.participation,
                                 cfg.reshuffle, cfg.seed)
        seen = set()
        for ids in plan.sampled:
            for k in ids.tolist():
                if k in seen:
                    return False, f"device {k} activated twice in round {j}"
                seen.add(k)
    return True, "no device activated twice in any planned round"


def _check_idx_loader():
    def idx_bytes(images, labels):
        n, r, c = images.shape
        img = (0x803).to_bytes(4, "big") + n.to_bytes(4, "big") \
            + r.to_bytes(4, "big") + c.to_bytes(4, "big") + images.tobytes()
        lab = (0x801).to_bytes(4, "big") + len(labels).to_bytes(4, "big") \
            + bytes(labels)
        return img, lab

    gen = np.random.default_rng(3)
    images = gen.integers(0, 256, size=(6, 2, 2), dtype=np.uint8)
    labels = [0, 1, 0, 1, 1, 0]
    img, lab = idx_bytes(images, labels)
    with tempfile.TemporaryDirectory() as tmp:
        ipath = os.path.join(tmp, "img")
        lpath = os.path.join(tmp, "lab")
        with open(ipath, "wb") as fh:
            fh.write(img)
        with open(lpath, "wb") as fh:
            fh.write(lab)
        pool = fedsets.load_idx(ipath, lpath)
        if pool.feature_dim != 4 or sum(pool.class_sizes()) != 6:
            return False, "well-formed pair mis-parsed"
        with open(ipath, "wb") as fh:
            fh.write(img[:-3])
        try:
            fedsets.load_idx(ipath, lpath)
            return False, "truncated image file accepted"
        except IngestionError:
            pass
    return True, "well-formed pair loads, truncation rejected"


_PROPERTIES = (
    ("rng-replay", _check_rng_replay),
    ("rng-distinct-paths", _check_rng_distinct),
    ("weighted-sum-cases", _check_weighted_sum),
    ("weighted-sum-parallel-bitexact", _check_weighted_sum_parallel),
    ("gradient-finite-difference", _check_grad_fd),
    ("losses-bounded-below", _check_losses_bounded),
    ("quadratic-analytic-consistency", _check_quad_analytic),
    ("partition-invariants", _check_partition),
    ("clustering-partitions", _check_clusterings),
    ("h-gamma-ordering", _check_h_gamma_ordering),
    ("lr-schedules", _check_schedules),
    ("local-train-closed-forms", _check_local_train_closed_form),
    ("round-plan", _check_plan_round),
    ("m1-fedavg-equivalence", _check_m1_equivalence),
    ("rerun-determinism", _check_rerun_determinism),
    ("thread-invariance", _check_thread_invariance),
    ("average-unbiasedness", _check_unbiased_average),
    ("bound-monotonicity", _check_bound_monotone),
    ("activation-budget", _check_activation_budget),
    ("idx-loader", _check_idx_loader),
)


def property_names():
    return [name for name, _ in _PROPERTIES]


def run_all(inject=None):
    """Run every property; returns a list of PropertyResult."""
    if inject is not None and inject not in _INJECTIONS:
        raise ConfigurationError(
            f"unknown injection {inject!r}, want one of {_INJECTIONS}")
    results = []
    for name, fn in _PROPERTIES:
        try:
            if fn is _check_grad_fd:
                passed, detail = fn(inject=inject)
            else:
                passed, detail = fn()
        except Exception as exc:  # a crashing property is a failing property
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(_result(name, passed, detail))
    return results
