# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend. Mirrors _py semantics; see that module for layouts."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, isfinite, log, pow, sqrt, tanh

cnp.import_array()

DEF TASK_QUAD = 0
DEF TASK_SOFTMAX = 1
DEF TASK_MLP = 2

DEF OPT_SGD = 0
DEF OPT_SGDM = 1
DEF OPT_ADAM = 2
DEF OPT_FEDPROX = 3


cdef double _row_loss_dz(int task_kind, int n_classes, int hidden,
                         const double[:, ::1] X, const cnp.int64_t[:] y,
                         Py_ssize_t r, const double[::1] w,
                         double[::1] z, double[::1] a) noexcept nogil:
    """Forward pass for row r into z (logits) and a (hidden activations).

    Returns the row loss. For softmax and mlp, z is overwritten with the
    softmax-minus-onehot error term dz ready for the backward pass.
    """
    cdef Py_ssize_t F = X.shape[1]
    cdef Py_ssize_t c, h, f
    cdef double acc, zmax, s, loss
    cdef Py_ssize_t cf = n_classes * F
    cdef Py_ssize_t o1, o2, o3

    if task_kind == TASK_SOFTMAX:
        for c in range(n_classes):
            acc = w[cf + c]
            for f in range(F):
                acc += w[c * F + f] * X[r, f]
            z[c] = acc
    else:
        o1 = hidden * F
        o2 = o1 + hidden
        o3 = o2 + n_classes * hidden
        for h in range(hidden):
            acc = w[o1 + h]
            for f in range(F):
                acc += w[h * F + f] * X[r, f]
            a[h] = tanh(acc)
        for c in range(n_classes):
            acc = w[o3 + c]
            for h in range(hidden):
                acc += w[o2 + c * hidden + h] * a[h]
            z[c] = acc

    zmax = z[0]
    for c in range(1, n_classes):
        if z[c] > zmax:
            zmax = z[c]
    s = 0.0
    for c in range(n_classes):
        s += exp(z[c] - zmax)
    loss = log(s) - (z[y[r]] - zmax)
    for c in range(n_classes):
        z[c] = exp(z[c] - zmax) / s
    z[y[r]] -= 1.0
    return loss


cdef double _accum_row_grad(int task_kind, int n_classes, int hidden,
                            const double[:, ::1] X, const cnp.int64_t[:] y,
                            Py_ssize_t r, const double[::1] w,
                            double[::1] g, double[::1] z, double[::1] a) noexcept nogil:
    """Add row r's gradient into g; returns the row loss."""
    cdef Py_ssize_t F = X.shape[1]
    cdef Py_ssize_t c, h, f
    cdef double loss, d, dpre
    cdef Py_ssize_t cf = n_classes * F
    cdef Py_ssize_t o1, o2, o3

    if task_kind == TASK_QUAD:
        loss = 0.0
        for f in range(F):
            d = w[f] - X[r, f]
            g[f] += d
            loss += d * d
        return 0.5 * loss

    loss = _row_loss_dz(task_kind, n_classes, hidden, X, y, r, w, z, a)
    if task_kind == TASK_SOFTMAX:
        for c in range(n_classes):
            for f in range(F):
                g[c * F + f] += z[c] * X[r, f]
            g[cf + c] += z[c]
    else:
        o1 = hidden * F
        o2 = o1 + hidden
        o3 = o2 + n_classes * hidden
        for c in range(n_classes):
            for h in range(hidden):
                g[o2 + c * hidden + h] += z[c] * a[h]
            g[o3 + c] += z[c]
        for h in range(hidden):
            d = 0.0
            for c in range(n_classes):
                d += w[o2 + c * hidden + h] * z[c]
            dpre = d * (1.0 - a[h] * a[h])
            for f in range(F):
                g[h * F + f] += dpre * X[r, f]
            g[o1 + h] += dpre
    return loss


def dataset_loss_grad(int task_kind, int n_classes, int hidden, X, y, w):
    """Mean loss and mean gradient over all rows of X."""
    if task_kind < TASK_QUAD or task_kind > TASK_MLP:
        raise ValueError(f"unknown task kind {task_kind}")
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const cnp.int64_t[:] yv = np.ascontiguousarray(y, dtype=np.int64)
    w_arr = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] wv = w_arr
    cdef Py_ssize_t m = Xv.shape[0]
    cdef Py_ssize_t dim = wv.shape[0]
    grad = np.zeros(dim, dtype=np.float64)
    cdef double[::1] gv = grad
    scratch_z = np.zeros(max(n_classes, 1), dtype=np.float64)
    scratch_a = np.zeros(max(hidden, 1), dtype=np.float64)
    cdef double[::1] zv = scratch_z
    cdef double[::1] av = scratch_a
    cdef double loss = 0.0
    cdef Py_ssize_t r, i
    with nogil:
        for r in range(m):
            loss += _accum_row_grad(task_kind, n_classes, hidden, Xv, yv, r, wv, gv, zv, av)
        for i in range(dim):
            gv[i] /= m
    return loss / m, grad


def local_sgd(int task_kind, int n_classes, int hidden, X, y, w0, lrs, batch_idx,
              int opt_kind, double momentum, double beta1, double beta2,
              double adam_eps, double mu_prox):
    """Run len(lrs) optimizer steps; see _py.local_sgd for the contract."""
    if task_kind < TASK_QUAD or task_kind > TASK_MLP:
        raise ValueError(f"unknown task kind {task_kind}")
    if opt_kind < OPT_SGD or opt_kind > OPT_FEDPROX:
        raise ValueError(f"unknown optimizer kind {opt_kind}")
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const cnp.int64_t[:] yv = np.ascontiguousarray(y, dtype=np.int64)
    w_arr = np.array(w0, dtype=np.float64)
    anchor_arr = np.array(w0, dtype=np.float64)
    cdef double[::1] wv = w_arr
    cdef const double[::1] anchor = anchor_arr
    cdef const double[::1] lrv = np.ascontiguousarray(lrs, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] bv = np.ascontiguousarray(batch_idx, dtype=np.int64)
    cdef Py_ssize_t E = lrv.shape[0]
    cdef Py_ssize_t B = bv.shape[1] if E > 0 else 0
    cdef Py_ssize_t dim = wv.shape[0]

    g_arr = np.zeros(dim, dtype=np.float64)
    v_arr = np.zeros(dim, dtype=np.float64)
    mt_arr = np.zeros(dim, dtype=np.float64)
    vt_arr = np.zeros(dim, dtype=np.float64)
    cdef double[::1] gv = g_arr
    cdef double[::1] vv = v_arr
    cdef double[::1] mtv = mt_arr
    cdef double[::1] vtv = vt_arr
    scratch_z = np.zeros(max(n_classes, 1), dtype=np.float64)
    scratch_a = np.zeros(max(hidden, 1), dtype=np.float64)
    cdef double[::1] zv = scratch_z
    cdef double[::1] av = scratch_a

    cdef Py_ssize_t t, b, i
    cdef double lr, gi, bc1, bc2, mh, vh
    cdef Py_ssize_t diverged = -1

    with nogil:
        for t in range(E):
            for i in range(dim):
                gv[i] = 0.0
            for b in range(B):
                _accum_row_grad(task_kind, n_classes, hidden, Xv, yv, bv[t, b], wv, gv, zv, av)
            lr = lrv[t]
            if opt_kind == OPT_SGD:
                for i in range(dim):
                    wv[i] = wv[i] - lr * (gv[i] / B)
            elif opt_kind == OPT_FEDPROX:
                for i in range(dim):
                    gi = gv[i] / B + mu_prox * (wv[i] - anchor[i])
                    wv[i] = wv[i] - lr * gi
            elif opt_kind == OPT_SGDM:
                for i in range(dim):
                    vv[i] = momentum * vv[i] + gv[i] / B
                    wv[i] = wv[i] - lr * vv[i]
            else:
                bc1 = 1.0 - pow(beta1, <double> (t + 1))
                bc2 = 1.0 - pow(beta2, <double> (t + 1))
                for i in range(dim):
                    gi = gv[i] / B
                    mtv[i] = beta1 * mtv[i] + (1.0 - beta1) * gi
                    vtv[i] = beta2 * vtv[i] + (1.0 - beta2) * (gi * gi)
                    mh = mtv[i] / bc1
                    vh = vtv[i] / bc2
                    wv[i] = wv[i] - lr * mh / (sqrt(vh) + adam_eps)
            for i in range(dim):
                if not isfinite(wv[i]):
                    diverged = t
                    break
            if diverged >= 0:
                break
    return w_arr, diverged
