"""Pure-numpy kernel backend.

Semantics here are the reference: the compiled backend mirrors this module
operation for operation. Within one backend results are bit-reproducible;
across backends they agree to tight floating-point tolerance only, because
numpy's reductions and a serial C loop round differently.

Task kinds and optimizer kinds are small integers, see _kernels.__init__.
Parameter vectors are flat float64 arrays with fixed layouts:

  quadratic:  [w]                                  dim = F
  softmax:    [W (C x F, row-major), b (C)]         dim = C*F + C
  mlp:        [W1 (h x F), b1 (h), W2 (C x h), b2]  dim = h*F + h + C*h + C
"""

import numpy as np

TASK_QUAD = 0
TASK_SOFTMAX = 1
TASK_MLP = 2

OPT_SGD = 0
OPT_SGDM = 1
OPT_ADAM = 2
OPT_FEDPROX = 3


def _softmax_parts(w, n_classes, n_features):
    cf = n_classes * n_features
    W = w[:cf].reshape(n_classes, n_features)
    b = w[cf:cf + n_classes]
    return W, b


def _mlp_parts(w, n_classes, hidden, n_features):
    o1 = hidden * n_features
    o2 = o1 + hidden
    o3 = o2 + n_classes * hidden
    W1 = w[:o1].reshape(hidden, n_features)
    b1 = w[o1:o2]
    W2 = w[o2:o3].reshape(n_classes, hidden)
    b2 = w[o3:o3 + n_classes]
    return W1, b1, W2, b2


def _ce_from_logits(Z, y):
    # stabilized cross-entropy; returns (mean loss, softmax probs)
    Z = Z - Z.max(axis=1, keepdims=True)
    expZ = np.exp(Z)
    denom = expZ.sum(axis=1, keepdims=True)
    P = expZ / denom
    rows = np.arange(Z.shape[0])
    loss = float(np.mean(np.log(denom[:, 0]) - Z[rows, y]))
    return loss, P


def _batch_grad(task_kind, n_classes, hidden, X, y, w, want_loss=False):
    m, F = X.shape
    if task_kind == TASK_QUAD:
        grad = w - X.mean(axis=0)
        if want_loss:
            diff = w[None, :] - X
            loss = 0.5 * float(np.mean(np.einsum("ij,ij->i", diff, diff)))
            return loss, grad
        return None, grad
    if task_kind == TASK_SOFTMAX:
        W, b = _softmax_parts(w, n_classes, F)
        Z = X @ W.T + b
        loss, P = _ce_from_logits(Z, y)
        dZ = P
        dZ[np.arange(m), y] -= 1.0
        dZ /= m
        grad = np.concatenate([(dZ.T @ X).ravel(), dZ.sum(axis=0)])
        return (loss if want_loss else None), grad
    if task_kind == TASK_MLP:
        W1, b1, W2, b2 = _mlp_parts(w, n_classes, hidden, F)
        A = np.tanh(X @ W1.T + b1)
        Z = A @ W2.T + b2
        loss, P = _ce_from_logits(Z, y)
        dZ = P
        dZ[np.arange(m), y] -= 1.0
        dZ /= m
        dA = dZ @ W2
        dPre = dA * (1.0 - A * A)
        grad = np.concatenate([
            (dPre.T @ X).ravel(),
            dPre.sum(axis=0),
            (dZ.T @ A).ravel(),
            dZ.sum(axis=0),
        ])
        return (loss if want_loss else None), grad
    raise ValueError(f"unknown task kind {task_kind}")


def dataset_loss_grad(task_kind, n_classes, hidden, X, y, w):
    """Mean loss and mean gradient over all rows of X."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    loss, grad = _batch_grad(task_kind, n_classes, hidden, X, y, w, want_loss=True)
    return loss, grad


def local_sgd(task_kind, n_classes, hidden, X, y, w0, lrs, batch_idx,
              opt_kind, momentum, beta1, beta2, adam_eps, mu_prox):
    """Run len(lrs) optimizer steps on minibatches given by batch_idx rows.

    batch_idx[t] holds the sample indices of step t's minibatch. Optimizer
    state starts fresh. Returns (w_final, diverged_step); diverged_step is -1
    when all parameters stayed finite, else the first offending step index.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    w = np.array(w0, dtype=np.float64)
    anchor = np.array(w0, dtype=np.float64)
    lrs = np.asarray(lrs, dtype=np.float64)
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    E = lrs.shape[0]

    # overflow is legal here: the isfinite scan below owns divergence handling
    with np.errstate(over="ignore", invalid="ignore"):
        return _sgd_loop(task_kind, n_classes, hidden, X, y, w, anchor, lrs,
                         batch_idx, E, opt_kind, momentum, beta1, beta2,
                         adam_eps, mu_prox)


def _sgd_loop(task_kind, n_classes, hidden, X, y, w, anchor, lrs, batch_idx,
              E, opt_kind, momentum, beta1, beta2, adam_eps, mu_prox):
    if opt_kind == OPT_SGDM:
        v = np.zeros_like(w)
    elif opt_kind == OPT_ADAM:
        mt = np.zeros_like(w)
        vt = np.zeros_like(w)
    for t in range(E):
        rows = batch_idx[t]
        _, g = _batch_grad(task_kind, n_classes, hidden, X[rows], y[rows], w)
        if opt_kind == OPT_SGD:
            w = w - lrs[t] * g
        elif opt_kind == OPT_FEDPROX:
            gp = g + mu_prox * (w - anchor)
            w = w - lrs[t] * gp
        elif opt_kind == OPT_SGDM:
            v = momentum * v + g
            w = w - lrs[t] * v
        elif opt_kind == OPT_ADAM:
            step = t + 1
            mt = beta1 * mt + (1.0 - beta1) * g
            vt = beta2 * vt + (1.0 - beta2) * (g * g)
            mhat = mt / (1.0 - beta1 ** step)
            vhat = vt / (1.0 - beta2 ** step)
            w = w - lrs[t] * mhat / (np.sqrt(vhat) + adam_eps)
        else:
            raise ValueError(f"unknown optimizer kind {opt_kind}")
        if not np.isfinite(w).all():
            return w, t
    return w, -1
