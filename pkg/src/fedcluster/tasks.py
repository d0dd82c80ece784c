"""Loss-function families with per-sample and per-dataset oracles.

Three task kinds are supported:

  quadratic  f(w; x) = 0.5 * ||w - x||^2, labels ignored. Smooth and strongly
             convex with L = mu = 1, and every derived quantity (minimizer,
             minimum value, heterogeneity gaps) has a closed form, which makes
             it the verification oracle for the rest of the package.
  softmax    multinomial logistic regression (convex, smooth).
  mlp        one hidden tanh layer + softmax cross-entropy (nonconvex, smooth).

Parameter vectors are flat float64 arrays; layouts are documented in
fedcluster._kernels._py. Heavy evaluation is delegated to the active kernel
backend.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import weighted_sum
from .errors import ConfigurationError, UnsupportedTaskError

KINDS = ("quadratic", "softmax", "mlp")

_KIND_IDS = {
    "quadratic": _kernels.TASK_QUAD,
    "softmax": _kernels.TASK_SOFTMAX,
    "mlp": _kernels.TASK_MLP,
}


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int = 0


@dataclass(frozen=True)
class TaskModel:
    kind: str
    feature_dim: int
    n_classes: int = 1
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"task.kind {self.kind!r}: want one of {KINDS}")
        if self.feature_dim < 1:
            raise ConfigurationError("task.feature_dim must be >= 1")
        if self.kind in ("softmax", "mlp") and self.n_classes < 2:
            raise ConfigurationError(f"task.n_classes must be >= 2 for {self.kind}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigurationError("task.hidden must be >= 1")

    @property
    def kind_id(self):
        return _KIND_IDS[self.kind]

    @property
    def param_dim(self):
        f, c, h = self.feature_dim, self.n_classes, self.hidden
        if self.kind == "quadratic":
            return f
        if self.kind == "softmax":
            return c * f + c
        return h * f + h + c * h + c


@dataclass(frozen=True)
class AnalyticSolution:
    w_star: np.ndarray
    f_star: float
    per_device_f_star: np.ndarray
    per_cluster_f_star: np.ndarray = field(default=None)


def _check_w(task, w):
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != task.param_dim:
        raise ConfigurationError(
            f"parameter vector has shape {w.shape}, task {task.kind} needs ({task.param_dim},)"
        )
    return w


def _check_xy(task, X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != task.feature_dim:
        raise ConfigurationError(
            f"feature matrix has shape {X.shape}, task needs (*, {task.feature_dim})"
        )
    if X.shape[0] == 0:
        raise ConfigurationError("dataset is empty")
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ConfigurationError(f"labels have shape {y.shape}, want ({X.shape[0]},)")
    if task.kind != "quadratic" and ((y < 0).any() or (y >= task.n_classes).any()):
        raise ConfigurationError(f"label out of range [0, {task.n_classes})")
    return X, y


def sample_loss(task, w, xi):
    """Loss of one sample at w."""
    w = _check_w(task, w)
    X, y = _check_xy(task, xi.features[None, :], [xi.label])
    loss, _ = _kernels.dataset_loss_grad(task.kind_id, task.n_classes, task.hidden, X, y, w)
    return loss


def sample_grad(task, w, xi):
    """Gradient of sample_loss at w."""
    w = _check_w(task, w)
    X, y = _check_xy(task, xi.features[None, :], [xi.label])
    _, grad = _kernels.dataset_loss_grad(task.kind_id, task.n_classes, task.hidden, X, y, w)
    return grad


def dataset_loss_grad(task, w, X, y):
    """Mean loss and mean gradient over a dataset, fixed accumulation order."""
    w = _check_w(task, w)
    X, y = _check_xy(task, X, y)
    return _kernels.dataset_loss_grad(task.kind_id, task.n_classes, task.hidden, X, y, w)


def dataset_grad(task, w, X, y):
    return dataset_loss_grad(task, w, X, y)[1]


def init_params(task, stream):
    """Initial parameter vector; mlp layers are uniform in +-1/sqrt(fan_in).

    Draws come from the given RngStream in layout order, so one (seed, path)
    pair pins the initialization exactly.
    """
    f, c, h = task.feature_dim, task.n_classes, task.hidden
    if task.kind == "quadratic":
        return np.zeros(f)
    if task.kind == "softmax":
        return np.zeros(c * f + c)
    gen = stream.gen
    s1 = 1.0 / np.sqrt(f)
    s2 = 1.0 / np.sqrt(h)
    return np.concatenate([
        gen.uniform(-s1, s1, size=h * f),
        gen.uniform(-s1, s1, size=h),
        gen.uniform(-s2, s2, size=c * h),
        gen.uniform(-s2, s2, size=c),
    ])


def quadratic_analytic(task, fed, clustering=None):
    """Closed-form minimizers and minimum values for the quadratic family.

    The global objective is sum_k p_k * mean over device k's samples of
    0.5*||w - x||^2, minimized at the p-weighted mean of device feature
    means. Per-device and (when a clustering is given) per-cluster minima
    follow the same algebra restricted to the group's sample mixture.
    """
    if task.kind != "quadratic":
        raise UnsupportedTaskError(f"analytic solution needs a quadratic task, got {task.kind}")
    means = [dev.X.mean(axis=0) for dev in fed.devices]
    msq = np.array([float(np.mean(np.einsum("ij,ij->i", dev.X, dev.X))) for dev in fed.devices])
    p = fed.p
    w_star = weighted_sum(means, p)
    f_star = 0.5 * (float(p @ msq) - float(w_star @ w_star))
    per_device = 0.5 * (msq - np.array([float(m @ m) for m in means]))
    per_cluster = None
    if clustering is not None:
        per_cluster = np.empty(clustering.M)
        for K in range(clustering.M):
            members = clustering.members(K)
            wts = p[members] / clustering.q[K]
            cK = weighted_sum([means[k] for k in members], wts)
            mK = float(wts @ msq[members])
            per_cluster[K] = 0.5 * (mK - float(cK @ cK))
    return AnalyticSolution(
        w_star=w_star,
        f_star=f_star,
        per_device_f_star=per_device,
        per_cluster_f_star=per_cluster,
    )
