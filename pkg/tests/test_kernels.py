import os
import subprocess
import sys

import numpy as np
import pytest

from fedcluster import _kernels
from fedcluster._kernels import get_backends
from fedcluster.tasks import TaskModel

TASKS = [
    TaskModel("quadratic", feature_dim=6),
    TaskModel("softmax", feature_dim=5, n_classes=4),
    TaskModel("mlp", feature_dim=4, n_classes=3, hidden=5),
]
OPTS = [
    # (kind_id, momentum, beta1, beta2, eps, mu_prox)
    (0, 0.0, 0.9, 0.999, 1e-8, 0.0),
    (1, 0.6, 0.9, 0.999, 1e-8, 0.0),
    (2, 0.0, 0.9, 0.999, 1e-8, 0.0),
    (3, 0.0, 0.9, 0.999, 1e-8, 0.3),
]


def _case(task, gen, rows=9, steps=12, batch=3):
    X = gen.normal(size=(rows, task.feature_dim))
    if task.kind == "quadratic":
        y = np.zeros(rows, dtype=np.int64)
    else:
        y = gen.integers(0, task.n_classes, size=rows, dtype=np.int64)
    w = gen.normal(size=task.param_dim) * 0.4
    lrs = gen.uniform(0.01, 0.05, size=steps)
    idx = gen.integers(0, rows, size=(steps, batch), dtype=np.int64)
    return X, y, w, lrs, idx


def test_backend_listing():
    names = [n for n, _ in get_backends()]
    assert names[0] == "python"
    assert _kernels.backend_name in names
    if _kernels.HAVE_EXT:
        assert names == ["python", "cython"]


def test_backends_agree_on_loss_grad():
    backends = get_backends()
    if len(backends) < 2:
        pytest.skip("compiled extension not built")
    gen = np.random.default_rng(2)
    for task in TASKS:
        for trial in range(10):
            X, y, w, _, _ = _case(task, gen)
            outs = [mod.dataset_loss_grad(task.kind_id, task.n_classes,
                                          task.hidden, X, y, w)
                    for _, mod in backends]
            (la, ga), (lb, gb) = outs
            assert abs(la - lb) <= 1e-9 * max(1.0, abs(la))
            assert np.allclose(ga, gb, rtol=1e-9, atol=1e-12)


def test_backends_agree_on_local_sgd():
    backends = get_backends()
    if len(backends) < 2:
        pytest.skip("compiled extension not built")
    gen = np.random.default_rng(3)
    for task in TASKS:
        for opt in OPTS:
            X, y, w, lrs, idx = _case(task, gen)
            outs = [mod.local_sgd(task.kind_id, task.n_classes, task.hidden,
                                  X, y, w, lrs, idx, *opt)
                    for _, mod in backends]
            (wa, da), (wb, db) = outs
            assert da == db == -1
            assert np.allclose(wa, wb, rtol=1e-9, atol=1e-12)


def test_backends_agree_on_divergence_step():
    backends = get_backends()
    if len(backends) < 2:
        pytest.skip("compiled extension not built")
    gen = np.random.default_rng(4)
    task = TASKS[0]
    X, y, w, _, idx = _case(task, gen)
    lrs = np.full(idx.shape[0], 1e200)
    outs = [mod.local_sgd(task.kind_id, task.n_classes, task.hidden,
                          X, y, w, lrs, idx, 0, 0.0, 0.9, 0.999, 1e-8, 0.0)
            for _, mod in backends]
    (_, da), (_, db) = outs
    assert da == db >= 0


def test_local_sgd_does_not_mutate_inputs():
    for _, mod in get_backends():
        gen = np.random.default_rng(5)
        task = TASKS[1]
        X, y, w, lrs, idx = _case(task, gen)
        w_before = w.copy()
        out, _ = mod.local_sgd(task.kind_id, task.n_classes, task.hidden,
                               X, y, w, lrs, idx, 0, 0.0, 0.9, 0.999, 1e-8, 0.0)
        assert np.array_equal(w, w_before)
        assert out is not w


def test_kind_guards():
    gen = np.random.default_rng(6)
    task = TASKS[0]
    X, y, w, lrs, idx = _case(task, gen)
    for _, mod in get_backends():
        with pytest.raises(ValueError):
            mod.dataset_loss_grad(9, 1, 0, X, y, w)
        with pytest.raises(ValueError):
            mod.local_sgd(task.kind_id, task.n_classes, task.hidden,
                          X, y, w, lrs, idx, 9, 0.0, 0.9, 0.999, 1e-8, 0.0)


def test_pure_python_env_override():
    code = ("import fedcluster._kernels as k; "
            "print(k.backend_name)")
    env = dict(os.environ, FEDCLUSTER_PURE_PY="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_adam_bias_correction_first_step():
    # after one Adam step from w with gradient g, the update is exactly
    # lr * sign-ish g / (|g| + eps') with the bias corrections cancelling
    for _, mod in get_backends():
        task = TaskModel("quadratic", feature_dim=1)
        X = np.array([[0.0]])
        y = np.zeros(1, dtype=np.int64)
        w = np.array([2.0])
        lrs = np.array([0.1])
        idx = np.zeros((1, 1), dtype=np.int64)
        out, flag = mod.local_sgd(task.kind_id, 1, 0, X, y, w, lrs, idx,
                                  2, 0.0, 0.9, 0.999, 1e-8, 0.0)
        assert flag == -1
        g = 2.0
        mhat = g
        vhat = g * g
        want = 2.0 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert abs(out[0] - want) <= 1e-12
