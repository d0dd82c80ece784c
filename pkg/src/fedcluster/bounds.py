"""Theoretical constants, convergence bounds, and empirical rate fitting.

The two guarantees this package checks runs against:

  nonconvex, constant rate 1/sqrt(T*M*E):
      (1/T) sum_j ||grad f(W_jM)||^2  <=  2*C / sqrt(T*M*E)
      C = 2*(f(W_0) - inf f) + 4*L*(H_cluster + V)
      V = sum_K (1/q_K) * sum_{k in K} p_k^2 * s_k^2

  strongly convex, inverse-time rate:
      E f(W_TM) - f*  <=  L*(gamma*G^2 + 4*B) / (2*mu^2*T*M*E)
      B = (4*E*M + 0.75*E^2)*G^2 + 4*L*Gamma_cluster + V
      gamma = max(8*L/mu, M*E)

Constants (L, G, s_k) are estimated from probe points; the estimates are
lower bounds of the true suprema, so bound checks should also be run with an
inflated G (see the acceptance tests).
"""

from dataclasses import dataclass

import numpy as np

from . import clustering as _clustering
from . import tasks
from .core import derive_stream, sq_norm
from .engine import global_loss_grad
from .errors import ConfigurationError


@dataclass(frozen=True)
class BoundInputs:
    L: float
    G: float
    s_sq: np.ndarray
    H_cluster: float
    f0_gap: float
    T: int
    M: int
    E: int
    p: np.ndarray
    q: np.ndarray
    assignment: np.ndarray
    mu: float = None
    Gamma_cluster: float = 0.0

    def __post_init__(self):
        for name in ("L", "G", "H_cluster", "f0_gap", "Gamma_cluster"):
            v = getattr(self, name)
            if v < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {v}")
        if self.mu is not None and self.mu > self.L:
            raise ConfigurationError(f"mu={self.mu} exceeds L={self.L}")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: tuple


def variance_term(p, q, assignment, s_sq):
    """sum over clusters K of (1/q_K) * sum_{k in K} p_k^2 * s_k^2."""
    p = np.asarray(p, dtype=np.float64)
    s_sq = np.asarray(s_sq, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    total = 0.0
    for K in range(len(q)):
        ids = np.flatnonzero(assignment == K)
        total += float((p[ids] ** 2 * s_sq[ids]).sum()) / float(q[K])
    return total


def estimate_constants(task, fed, probes, samples_per_probe=None, seed=0):
    """Empirical (L_hat, G_hat, s_sq_hat) from probe points.

    L_hat is the largest secant slope of the global gradient over probe
    pairs. G_hat is the square root of the largest per-sample gradient
    square norm seen. s_sq_hat[k] is device k's worst per-sample gradient
    variance over the probes. All three are lower bounds of the constants
    they estimate.
    """
    if not probes:
        raise ConfigurationError("estimate_constants needs at least one probe")
    global_grads = []
    g_sq_max = 0.0
    s_sq_hat = np.zeros(fed.n)
    for w in probes:
        _, gbar = global_loss_grad(task, fed, w)
        global_grads.append(gbar)
        for dev in fed.devices:
            nloc = dev.n
            if samples_per_probe is None or samples_per_probe >= nloc:
                rows = np.arange(nloc)
            else:
                gen = derive_stream(seed, ("constants", dev.device_id)).gen
                rows = gen.integers(0, nloc, size=samples_per_probe)
            sample_grads = np.array([
                tasks.sample_grad(task, w, tasks.Sample(dev.X[r], int(dev.y[r])))
                for r in rows
            ])
            sq = np.einsum("ij,ij->i", sample_grads, sample_grads)
            g_sq_max = max(g_sq_max, float(sq.max()))
            gmean = sample_grads.mean(axis=0)
            dev_var = float(np.mean(np.einsum(
                "ij,ij->i", sample_grads - gmean, sample_grads - gmean)))
            s_sq_hat[dev.device_id] = max(s_sq_hat[dev.device_id], dev_var)

    L_hat = 0.0
    for i in range(len(probes)):
        for j in range(i + 1, len(probes)):
            du = sq_norm(np.asarray(probes[i]) - np.asarray(probes[j]))
            if du > 0:
                dg = sq_norm(global_grads[i] - global_grads[j])
                L_hat = max(L_hat, (dg / du) ** 0.5)
    return L_hat, g_sq_max ** 0.5, s_sq_hat


def bound_nonconvex(inputs):
    """(C, bound on the run-average squared gradient norm)."""
    V = variance_term(inputs.p, inputs.q, inputs.assignment, inputs.s_sq)
    C = 2.0 * inputs.f0_gap + 4.0 * inputs.L * (inputs.H_cluster + V)
    bound = 2.0 * C / np.sqrt(inputs.T * inputs.M * inputs.E)
    return C, float(bound)


def bound_strongly_convex(inputs):
    """(gamma, B, bound on the final loss gap); needs mu."""
    if inputs.mu is None:
        raise ConfigurationError("strongly convex bound needs mu")
    gamma = max(8.0 * inputs.L / inputs.mu, float(inputs.M * inputs.E))
    V = variance_term(inputs.p, inputs.q, inputs.assignment, inputs.s_sq)
    B = ((4.0 * inputs.E * inputs.M + 0.75 * inputs.E ** 2) * inputs.G ** 2
         + 4.0 * inputs.L * inputs.Gamma_cluster + V)
    bound = (inputs.L * (gamma * inputs.G ** 2 + 4.0 * B)
             / (2.0 * inputs.mu ** 2 * inputs.T * inputs.M * inputs.E))
    return gamma, B, float(bound)


def required_rounds(inputs, eps):
    """Rounds sufficient for the constant-rate guarantee to push the
    run-average squared gradient norm below eps: 4*C^2 / (eps^2 * M * E)."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    C, _ = bound_nonconvex(inputs)
    return 4.0 * C ** 2 / (eps ** 2 * inputs.M * inputs.E)


def avg_grad_norm(log):
    """Run average of the per-round squared gradient norms."""
    if not log.records:
        raise ConfigurationError("empty run log")
    return float(np.mean(log.grad_sq_norms))


def rate_fit(budget_metric_pairs):
    """Least-squares slope of log(metric) against log(budget)."""
    pairs = [(float(x), float(y)) for x, y in budget_metric_pairs]
    if len(pairs) < 3:
        raise ConfigurationError("rate_fit needs at least 3 points")
    for x, y in pairs:
        if x <= 0 or y <= 0:
            raise ConfigurationError(f"rate_fit needs positive values, got ({x}, {y})")
    lx = np.log([x for x, _ in pairs])
    ly = np.log([y for _, y in pairs])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r_squared=r2,
                   points=tuple(zip(lx.tolist(), ly.tolist())))


def rounds_to_target(log, target):
    """First round whose train loss is at or below target, or None."""
    if not np.isfinite(target):
        raise ConfigurationError("target must be finite")
    for rec in log.records:
        if rec.train_loss <= target:
            return rec.round
    return None


def collect_inputs(task, fed, clus, T, E, seed, probes=None, mu=None):
    """Assemble BoundInputs for a planned run: estimates constants, measures
    heterogeneity, and evaluates the starting gap from the shared init point."""
    if probes is None:
        probes = _clustering.default_probes(task, seed)
    L_hat, G_hat, s_sq_hat = estimate_constants(task, fed, probes)
    report = _clustering.estimate_H(task, fed, clus, probes)
    w0 = tasks.init_params(task, derive_stream(seed, ("init",)))
    f0, _ = global_loss_grad(task, fed, w0)
    gamma_cluster = 0.0
    inf_f = 0.0
    if task.kind == "quadratic":
        sol = tasks.quadratic_analytic(task, fed, clus)
        inf_f = sol.f_star
        _, gamma_cluster = _clustering.estimate_Gamma(task, fed, clus)
        L_hat = max(L_hat, 1.0)
        mu = 1.0 if mu is None else mu
    return BoundInputs(
        L=L_hat, G=G_hat, s_sq=s_sq_hat, H_cluster=report.H_cluster_hat,
        f0_gap=max(f0 - inf_f, 0.0), T=T, M=clus.M, E=E,
        p=fed.p, q=clus.q, assignment=clus.assignment,
        mu=mu, Gamma_cluster=max(gamma_cluster, 0.0),
    )
