"""Cluster-cycling federated optimization engine.

One learning round processes every cluster once, in a per-round random order:
the current global model is broadcast to a sampled subset of the active
cluster's devices, each runs E local optimizer steps on its own data, and the
weighted average of the returned models becomes the next global model. With M
clusters a round therefore performs M global updates; M = 1 over a single
all-device cluster is exactly classic federated averaging, which is also how
run_fedavg is implemented.

Determinism contract: every random decision (cluster order, device sampling,
minibatch draws) uses a stream derived from (master seed, structured path),
and all model averaging reduces in ascending device-id order. Two runs of the
same config on the same backend are bit-identical, regardless of the worker
thread count. Timing fields are the only exception.
"""

import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, tasks
from .core import derive_stream, sq_norm, weighted_sum
from .errors import ConfigurationError, DivergenceError, InvariantViolation
from .clustering import make_clustering

SCHEDULE_KINDS = ("constant_theory", "constant", "inverse_time")
OPTIMIZER_KINDS = ("sgd", "sgdm", "adam", "fedprox")

_OPT_IDS = {
    "sgd": _kernels.OPT_SGD,
    "sgdm": _kernels.OPT_SGDM,
    "adam": _kernels.OPT_ADAM,
    "fedprox": _kernels.OPT_FEDPROX,
}


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule over the flattened step index (j*M + K)*E + t.

    constant_theory: eta = 1/sqrt(T*M*E), the rate the nonconvex guarantee
    assumes. constant: explicit eta. inverse_time: eta = 2/(mu*(s + gamma))
    with gamma = max(8*L/mu, M*E), the strongly convex schedule.
    """

    kind: str
    eta: float = None
    mu: float = None
    L: float = 1.0
    T: int = None
    M: int = None
    E: int = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"schedule.kind {self.kind!r}: want one of {SCHEDULE_KINDS}")
        if self.kind == "constant" and (self.eta is None or self.eta <= 0):
            raise ConfigurationError("schedule.eta must be positive for constant")
        if self.kind == "inverse_time" and (self.mu is None or self.mu <= 0):
            raise ConfigurationError("schedule.mu must be positive for inverse_time")

    @property
    def gamma(self):
        if self.kind != "inverse_time":
            raise ConfigurationError("gamma only defined for inverse_time")
        return max(8.0 * self.L / self.mu, float(self.M * self.E))


def constant_theory(T=None, M=None, E=None):
    return LrSchedule(kind="constant_theory", T=T, M=M, E=E)


def constant_lr(eta):
    return LrSchedule(kind="constant", eta=eta)


def inverse_time(mu, L=1.0, M=None, E=None):
    return LrSchedule(kind="inverse_time", mu=mu, L=L, M=M, E=E)


def resolve_schedule(spec, T, M, E):
    """Fill a schedule's run-shape fields from the run they will drive."""
    if spec.kind == "constant":
        return spec
    return replace(spec, T=spec.T or T, M=spec.M or M, E=spec.E or E)


def lr_value(schedule, j, K, t):
    """Learning rate at round j, cycle K, local step t."""
    if schedule.kind == "constant":
        return schedule.eta
    if schedule.kind == "constant_theory":
        if not (schedule.T and schedule.M and schedule.E):
            raise ConfigurationError("constant_theory schedule missing (T, M, E)")
        return (schedule.T * schedule.M * schedule.E) ** -0.5
    if not (schedule.M and schedule.E):
        raise ConfigurationError("inverse_time schedule missing (M, E)")
    s = (j * schedule.M + K) * schedule.E + t
    return 2.0 / (schedule.mu * (s + schedule.gamma))


@dataclass(frozen=True)
class LocalOptimizerSpec:
    kind: str = "sgd"
    batch_size: int = 1
    momentum: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mu_prox: float = 0.1

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigurationError(
                f"optimizer.kind {self.kind!r}: want one of {OPTIMIZER_KINDS}"
            )
        if self.batch_size < 1:
            raise ConfigurationError("optimizer.batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("optimizer.momentum must be in [0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError("optimizer.beta1/beta2 must be in (0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("optimizer.eps must be positive")
        if self.mu_prox < 0:
            raise ConfigurationError("optimizer.mu_prox must be >= 0")

    @property
    def kind_id(self):
        return _OPT_IDS[self.kind]


@dataclass(frozen=True)
class RoundPlan:
    sigma: np.ndarray
    sampled: tuple


@dataclass(frozen=True)
class RoundRecord:
    round: int
    cycle_count: int
    train_loss: float
    grad_sq_norm: float
    lr: float
    wall_ms: float


@dataclass(frozen=True)
class RunLog:
    algorithm: str
    seed: int
    T: int
    M: int
    E: int
    records: tuple
    final_params: np.ndarray
    final_loss: float
    final_grad_sq: float
    backend: str

    @property
    def losses(self):
        return np.array([r.train_loss for r in self.records])

    @property
    def grad_sq_norms(self):
        return np.array([r.grad_sq_norm for r in self.records])


@dataclass(frozen=True)
class RunConfig:
    task: object
    fed: object
    clustering: object
    T: int
    E: int
    schedule: LrSchedule
    optimizer: LocalOptimizerSpec = field(default_factory=LocalOptimizerSpec)
    participation: float = 1.0
    reshuffle: bool = True
    seed: int = 0
    nominal_mass_averaging: bool = False
    threads: int = None
    algorithm: str = "fedcluster"
    L_hint: float = None
    G_hint: float = None
    C_hint: float = None

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.E < 0:
            raise ConfigurationError("E must be >= 0")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigurationError("participation must be in (0, 1]")
        min_dev = min(dev.n for dev in self.fed.devices)
        if self.optimizer.batch_size > min_dev:
            raise ConfigurationError(
                f"optimizer.batch_size={self.optimizer.batch_size} exceeds smallest "
                f"device dataset ({min_dev})"
            )
        if self.task.param_dim < 1:
            raise ConfigurationError("task has no parameters")


def resolve_threads(explicit=None):
    """Worker count: explicit, else FEDCLUSTER_THREADS, else 1."""
    if explicit is not None:
        n = int(explicit)
    else:
        env = os.environ.get("FEDCLUSTER_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigurationError(
                f"FEDCLUSTER_THREADS={env!r} is not an integer"
            ) from None
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    return n


def plan_round(j, clustering, participation, reshuffle, master_seed):
    """Cluster order and per-cycle device samples for round j.

    The order is a fresh uniform permutation each round (or the identity when
    reshuffle is off); each cycle samples ceil(participation * cluster size)
    devices without replacement. Both draws come from round-scoped streams.
    """
    M = clustering.M
    if reshuffle and M > 1:
        sigma = derive_stream(master_seed, ("round", j, "perm")).gen.permutation(M)
    else:
        sigma = np.arange(M, dtype=np.int64)
    sampled = []
    for K in range(M):
        members = clustering.members(int(sigma[K]))
        m = math.ceil(participation * members.size)
        if m < 1:
            raise ConfigurationError(
                f"participation {participation} samples no devices from a "
                f"cluster of {members.size}"
            )
        if m >= members.size:
            ids = members
        else:
            gen = derive_stream(master_seed, ("round", j, "cycle", K, "sample")).gen
            ids = np.sort(gen.choice(members, size=m, replace=False))
        sampled.append(ids)
    return RoundPlan(sigma=sigma, sampled=tuple(sampled))


def local_train(task, device, w_init, E, schedule, j, K, opt, rng):
    """E local optimizer steps on one device from the broadcast model w_init.

    Minibatch sample indices are drawn uniformly with replacement from the
    device's data using the supplied stream. Optimizer state starts fresh:
    a sampled device keeps no state between activations.
    """
    lrs = np.array([lr_value(schedule, j, K, t) for t in range(E)], dtype=np.float64)
    batches = rng.gen.integers(0, device.n, size=(E, opt.batch_size), dtype=np.int64)
    w_out, diverged = _kernels.local_sgd(
        task.kind_id, task.n_classes, task.hidden,
        device.X, device.y, w_init, lrs, batches,
        opt.kind_id, opt.momentum, opt.beta1, opt.beta2, opt.eps, opt.mu_prox,
    )
    if diverged >= 0:
        raise DivergenceError(j, K, device.device_id, diverged)
    return w_out


def cluster_average(members, fed, clustering, strict=False):
    """Weighted average of returned device models, ascending device id.

    Weights are p_k normalized over the sampled set. strict=True instead
    divides by the full cluster weight q_K, the literal broadcast-average
    formula; under partial participation those weights sum to less than one,
    which shrinks the model toward zero, so renormalization is the default.
    """
    if not members:
        raise ConfigurationError("cluster_average: no members")
    members = sorted(members, key=lambda kv: kv[0])
    ids = [k for k, _ in members]
    K = int(clustering.assignment[ids[0]])
    if any(int(clustering.assignment[k]) != K for k in ids):
        raise InvariantViolation("cluster_average: members span multiple clusters")
    if len(set(ids)) != len(ids):
        raise InvariantViolation("cluster_average: duplicate device id")
    weights = np.array([fed.p[k] for k in ids])
    denom = clustering.q[K] if strict else float(weights.sum())
    return weighted_sum([w for _, w in members], weights / denom)


def global_loss_grad(task, fed, w):
    """Exact objective value and gradient over the whole federation."""
    loss = 0.0
    grads = []
    for dev in fed.devices:
        l_k, g_k = tasks.dataset_loss_grad(task, w, dev.X, dev.y)
        loss += dev.p_k * l_k
        grads.append(g_k)
    return loss, weighted_sum(grads, fed.p)


def _theory_warnings(cfg, schedule):
    if schedule.kind != "constant_theory":
        return
    L = cfg.L_hint if cfg.L_hint is not None else 1.0
    M = cfg.clustering.M
    t_floor = L * L * max(1.0, 16.0 / (cfg.E * M)) if cfg.E else L * L
    if cfg.T < t_floor:
        warnings.warn(
            f"T={cfg.T} below the guarantee's floor {t_floor:.3g}; "
            "the constant-rate bound may not apply",
            RuntimeWarning,
        )
    if cfg.G_hint is not None and cfg.C_hint is not None:
        cap = cfg.C_hint / (8.0 * L * cfg.G_hint ** 2)
        if M * cfg.E > cap:
            warnings.warn(
                f"M*E={M * cfg.E} exceeds the guarantee's cap {cap:.3g}; "
                "the constant-rate bound may not apply",
                RuntimeWarning,
            )


def run(cfg):
    """Execute a full run; returns the round-by-round RunLog.

    Round j logs the exact loss and squared gradient norm of the global model
    as the round begins, then performs M cycles. The final model's metrics are
    logged separately, so a T-round log has T records plus the final pair.
    """
    M = cfg.clustering.M
    schedule = resolve_schedule(cfg.schedule, cfg.T, M, cfg.E)
    _theory_warnings(cfg, schedule)
    n_threads = resolve_threads(cfg.threads)

    w = tasks.init_params(cfg.task, derive_stream(cfg.seed, ("init",)))
    devices = cfg.fed.devices
    records = []
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        for j in range(cfg.T):
            t0 = time.perf_counter()
            loss, grad = global_loss_grad(cfg.task, cfg.fed, w)
            plan = plan_round(j, cfg.clustering, cfg.participation, cfg.reshuffle, cfg.seed)

            activated = set()
            for K in range(M):
                ids = plan.sampled[K]
                for k in ids:
                    if int(k) in activated:
                        raise InvariantViolation(
                            f"device {k} activated twice in round {j}"
                        )
                    activated.add(int(k))

                def job(k, w_bcast=w, j=j, K=K):
                    rng = derive_stream(cfg.seed, ("round", j, "cycle", K, "dev", int(k)))
                    return local_train(cfg.task, devices[int(k)], w_bcast, cfg.E,
                                       schedule, j, K, cfg.optimizer, rng)

                if pool is None:
                    results = [(int(k), job(k)) for k in ids]
                else:
                    futures = [(int(k), pool.submit(job, k)) for k in ids]
                    results = [(k, f.result()) for k, f in futures]
                w = cluster_average(results, cfg.fed, cfg.clustering,
                                    strict=cfg.nominal_mass_averaging)

            wall_ms = (time.perf_counter() - t0) * 1e3
            records.append(RoundRecord(
                round=j, cycle_count=j * M, train_loss=loss,
                grad_sq_norm=sq_norm(grad), lr=lr_value(schedule, j, 0, 0),
                wall_ms=wall_ms,
            ))
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)

    final_loss, final_grad = global_loss_grad(cfg.task, cfg.fed, w)
    return RunLog(
        algorithm=cfg.algorithm, seed=cfg.seed, T=cfg.T, M=M, E=cfg.E,
        records=tuple(records), final_params=w, final_loss=final_loss,
        final_grad_sq=sq_norm(final_grad), backend=_kernels.backend_name,
    )


def run_fedavg(cfg):
    """Classic federated averaging: the single-cluster special case.

    Participation applies to the whole federation and each round performs one
    global averaging step. Shares the init and sampling streams with run(),
    so a single-cluster run() is bit-identical to this.
    """
    one = make_clustering(cfg.fed, np.zeros(cfg.fed.n, dtype=np.int64), 1)
    return run(replace(cfg, clustering=one, algorithm="fedavg"))
