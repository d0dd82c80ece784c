"""Device-to-cluster assignment and heterogeneity estimation.

Heterogeneity is measured two ways. H is the worst-case weighted variance of
group gradients around the global gradient, taken at device level (weights
p_k) and at cluster level (weights q_K). Gamma is the gap between the global
minimum value and the weighted sum of per-group minima; it only exists in
closed form for the quadratic family, so it is reported for that family only.
Grouping devices can only shrink both quantities, which is the ordering the
tests pin down: H_cluster <= H_device and Gamma_cluster <= Gamma_device.

The supremum over parameter space in H's definition is approximated by a max
over probe points. For the quadratic family the summand does not depend on
the probe at all (gradients differ from the global one by a constant), so
the probe max is exact there.
"""

from dataclasses import dataclass

import numpy as np

from . import tasks
from .core import derive_stream, sq_norm, weighted_sum
from .errors import ConfigurationError

STRATEGIES = ("random_uniform", "major_class", "singleton")


@dataclass(frozen=True)
class Clustering:
    assignment: np.ndarray
    M: int
    q: np.ndarray
    _members: tuple

    def members(self, K):
        """Ascending device ids of cluster K."""
        return self._members[K]


@dataclass(frozen=True)
class HeterogeneityReport:
    H_device_hat: float
    H_cluster_hat: float
    Gamma_device_hat: float = None
    Gamma_cluster_hat: float = None
    n_probes: int = 0


def make_clustering(fed, assignment, M):
    """Validate an assignment vector and package it with cluster weights."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (fed.n,):
        raise ConfigurationError(f"assignment has shape {assignment.shape}, want ({fed.n},)")
    if (assignment < 0).any() or (assignment >= M).any():
        raise ConfigurationError(f"assignment values must lie in [0, {M})")
    members = []
    q = np.zeros(M)
    for K in range(M):
        ids = np.flatnonzero(assignment == K)
        if ids.size == 0:
            raise ConfigurationError(f"cluster {K} is empty")
        members.append(ids)
        q[K] = float(fed.p[ids].sum())
    if abs(float(q.sum()) - 1.0) > 1e-9:
        raise ConfigurationError(f"cluster weights sum to {q.sum()}, want 1")
    return Clustering(assignment=assignment, M=M, q=q, _members=tuple(members))


def cluster_random_uniform(fed, M, seed):
    """Uniformly random partition into M equal-size clusters."""
    if M < 1 or fed.n % M != 0:
        raise ConfigurationError(f"M={M} must be >= 1 and divide n={fed.n}")
    perm = derive_stream(seed, ("cluster", "uniform")).gen.permutation(fed.n)
    size = fed.n // M
    assignment = np.empty(fed.n, dtype=np.int64)
    for i, dev in enumerate(perm):
        assignment[dev] = i // size
    return make_clustering(fed, assignment, M)


def cluster_major_class(fed, M, rho_cluster, seed):
    """Class-aligned clustering controlled by rho_cluster.

    Cluster K is assigned class K and takes round(rho_cluster * n/M) devices
    whose major class is K; its remaining slots are spread evenly over the
    other classes, one extra slot per class cyclically starting just past the
    assigned class. The cyclic start keeps per-class demand balanced with the
    per-class device supply when M equals n_classes; a fixed start would ask
    for more devices of low classes than exist.
    """
    ncls = fed.n_classes
    if M < 1 or M > ncls:
        raise ConfigurationError(f"M={M} must be in [1, n_classes={ncls}]")
    if fed.n % M != 0:
        raise ConfigurationError(f"M={M} must divide n={fed.n}")
    if not 0.0 <= rho_cluster <= 1.0:
        raise ConfigurationError("rho_cluster must be in [0, 1]")

    size = fed.n // M
    major_slots = int(np.floor(rho_cluster * size + 0.5))
    if ncls == 1 and major_slots < size:
        raise ConfigurationError("single-class federation needs rho_cluster = 1.0")

    pools = {}
    for c in range(ncls):
        ids = sorted(dev.device_id for dev in fed.devices if dev.major_class == c)
        gen = derive_stream(seed, ("cluster", "major", c)).gen
        ids = [ids[i] for i in gen.permutation(len(ids))]
        pools[c] = ids

    assignment = np.full(fed.n, -1, dtype=np.int64)

    def take(c, count, K):
        pool = pools[c]
        if len(pool) < count:
            raise ConfigurationError(
                f"cluster {K} needs {count} devices of major class {c}, "
                f"only {len(pool)} unassigned"
            )
        got, pools[c] = pool[:count], pool[count:]
        for dev in got:
            assignment[dev] = K

    rest = size - major_slots
    base, rem = divmod(rest, ncls - 1) if ncls > 1 else (0, 0)
    for K in range(M):
        take(K, major_slots, K)
        others = [(K + 1 + i) % ncls for i in range(ncls - 1)]
        for i, c in enumerate(others):
            take(c, base + (1 if i < rem else 0), K)

    leftover = int((assignment < 0).sum())
    if leftover:
        raise ConfigurationError(
            f"{leftover} devices left unassigned; rho_cluster={rho_cluster} "
            f"rounding does not cover n/M={size} slots per cluster"
        )
    return make_clustering(fed, assignment, M)


def cluster_singleton(fed):
    """Every device its own cluster; makes cluster- and device-level H coincide."""
    return make_clustering(fed, np.arange(fed.n, dtype=np.int64), fed.n)


def default_probes(task, seed, count=16, scale=1.0):
    """Initialization point plus `count` Gaussian perturbations around it."""
    w0 = tasks.init_params(task, derive_stream(seed, ("init",)))
    probes = [w0]
    for i in range(count):
        gen = derive_stream(seed, ("probes", i)).gen
        probes.append(w0 + scale * gen.standard_normal(w0.shape[0]))
    return probes


def estimate_H(task, fed, clustering, probes):
    """Probe-max estimates of device- and cluster-level gradient variance."""
    if not probes:
        raise ConfigurationError("estimate_H needs at least one probe point")
    p = fed.p
    h_dev = -np.inf
    h_clus = -np.inf
    for w in probes:
        grads = [tasks.dataset_grad(task, w, dev.X, dev.y) for dev in fed.devices]
        gbar = weighted_sum(grads, p)
        dev_term = 0.0
        for k in range(fed.n):
            dev_term += float(p[k]) * sq_norm(grads[k] - gbar)
        clus_term = 0.0
        for K in range(clustering.M):
            ids = clustering.members(K)
            gK = weighted_sum([grads[k] for k in ids], p[ids] / clustering.q[K])
            clus_term += float(clustering.q[K]) * sq_norm(gK - gbar)
        h_dev = max(h_dev, dev_term)
        h_clus = max(h_clus, clus_term)
    return HeterogeneityReport(
        H_device_hat=h_dev, H_cluster_hat=h_clus, n_probes=len(probes)
    )


def estimate_Gamma(task, fed, clustering):
    """Closed-form minimum-value gaps for the quadratic family.

    Returns (Gamma_device_hat, Gamma_cluster_hat). Raises for other task
    kinds rather than reporting a number nothing can verify.
    """
    sol = tasks.quadratic_analytic(task, fed, clustering)
    gamma_dev = sol.f_star - float(fed.p @ sol.per_device_f_star)
    gamma_clus = sol.f_star - float(clustering.q @ sol.per_cluster_f_star)
    return gamma_dev, gamma_clus


def attach_gamma(report, task, fed, clustering):
    """Return a copy of an H report with Gamma fields filled in (quadratic only)."""
    gd, gc = estimate_Gamma(task, fed, clustering)
    return HeterogeneityReport(
        H_device_hat=report.H_device_hat,
        H_cluster_hat=report.H_cluster_hat,
        Gamma_device_hat=gd,
        Gamma_cluster_hat=gc,
        n_probes=report.n_probes,
    )
