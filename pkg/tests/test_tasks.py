import math

import numpy as np
import pytest

from conftest import class_federation, two_point_federation, random_quad_federation
from fedcluster.clustering import cluster_singleton
from fedcluster.core import derive_stream
from fedcluster.engine import global_loss_grad
from fedcluster.errors import ConfigurationError, UnsupportedTaskError
from fedcluster.tasks import (
    Sample, TaskModel, dataset_grad, dataset_loss_grad, init_params,
    quadratic_analytic, sample_grad, sample_loss,
)

FAMILIES = [
    TaskModel("quadratic", feature_dim=5),
    TaskModel("softmax", feature_dim=4, n_classes=3),
    TaskModel("mlp", feature_dim=3, n_classes=3, hidden=4),
]


def _random_point(task, gen):
    w = gen.normal(size=task.param_dim) * 0.8
    x = gen.normal(size=task.feature_dim)
    label = 0 if task.kind == "quadratic" else int(gen.integers(task.n_classes))
    return w, Sample(x, label)


@pytest.mark.parametrize("task", FAMILIES, ids=lambda t: t.kind)
def test_gradients_match_finite_differences(task):
    gen = np.random.default_rng(11)
    h = 1e-5
    worst = 0.0
    for _ in range(40):
        w, xi = _random_point(task, gen)
        g = sample_grad(task, w, xi)
        fd = np.empty_like(g)
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            fd[i] = (sample_loss(task, wp, xi) - sample_loss(task, wm, xi)) / (2 * h)
        rel = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)
        worst = max(worst, rel)
    assert worst <= 1e-6, f"{task.kind}: finite-difference mismatch {worst:.2e}"


def test_quadratic_frozen_values():
    task = TaskModel("quadratic", feature_dim=2)
    xi = Sample(np.array([3.0, 4.0]))
    w = np.zeros(2)
    assert sample_loss(task, w, xi) == 12.5
    assert np.array_equal(sample_grad(task, w, xi), np.array([-3.0, -4.0]))


def test_softmax_frozen_values():
    # two classes, zero weights: uniform predictions, loss ln 2, and the
    # gradient is (prob - onehot) stacked against the features
    task = TaskModel("softmax", feature_dim=2, n_classes=2)
    xi = Sample(np.array([1.0, 2.0]), label=1)
    w = np.zeros(task.param_dim)
    assert abs(sample_loss(task, w, xi) - math.log(2.0)) <= 1e-15
    want = np.array([0.5, 1.0, -0.5, -1.0, 0.5, -0.5])
    assert np.allclose(sample_grad(task, w, xi), want, rtol=0, atol=1e-15)


def test_classifier_losses_are_nonnegative():
    gen = np.random.default_rng(3)
    for task in FAMILIES:
        for _ in range(25):
            w, xi = _random_point(task, gen)
            assert sample_loss(task, w, xi) >= 0.0


def test_dataset_mean_matches_per_sample_average():
    gen = np.random.default_rng(8)
    for task in FAMILIES:
        for _ in range(17):
            rows = int(gen.integers(2, 9))
            w = gen.normal(size=task.param_dim) * 0.5
            X = gen.normal(size=(rows, task.feature_dim))
            if task.kind == "quadratic":
                y = np.zeros(rows, dtype=np.int64)
            else:
                y = gen.integers(0, task.n_classes, size=rows, dtype=np.int64)
            loss, grad = dataset_loss_grad(task, w, X, y)
            per = [sample_loss(task, w, Sample(X[r], int(y[r]))) for r in range(rows)]
            gs = [sample_grad(task, w, Sample(X[r], int(y[r]))) for r in range(rows)]
            assert abs(loss - np.mean(per)) <= 1e-12 * max(1.0, abs(loss))
            assert np.allclose(grad, np.mean(gs, axis=0), rtol=1e-12, atol=1e-12)


def test_param_layout_sizes():
    assert TaskModel("quadratic", feature_dim=6).param_dim == 6
    assert TaskModel("softmax", feature_dim=4, n_classes=3).param_dim == 15
    assert TaskModel("mlp", feature_dim=3, n_classes=2, hidden=4).param_dim == 4 * 3 + 4 + 2 * 4 + 2


def test_init_params_deterministic_and_bounded():
    for task in FAMILIES:
        a = init_params(task, derive_stream(5, ("init",)))
        b = init_params(task, derive_stream(5, ("init",)))
        assert np.array_equal(a, b)
        assert a.shape == (task.param_dim,)
    quad = init_params(FAMILIES[0], derive_stream(5, ("init",)))
    assert not quad.any()
    soft = init_params(FAMILIES[1], derive_stream(5, ("init",)))
    assert not soft.any()
    mlp_task = FAMILIES[2]
    mlp = init_params(mlp_task, derive_stream(5, ("init",)))
    f, h = mlp_task.feature_dim, mlp_task.hidden
    assert np.abs(mlp[:h * f + h]).max() <= 1.0 / math.sqrt(f)
    assert np.abs(mlp[h * f + h:]).max() <= 1.0 / math.sqrt(h)
    other = init_params(mlp_task, derive_stream(6, ("init",)))
    assert not np.array_equal(mlp, other)


def test_quadratic_analytic_two_point_fixture():
    fed = two_point_federation()
    task = TaskModel("quadratic", feature_dim=1)
    sol = quadratic_analytic(task, fed)
    assert abs(sol.w_star[0] - 1.0) <= 1e-12
    assert abs(sol.f_star - 0.5) <= 1e-12
    assert np.allclose(sol.per_device_f_star, [0.0, 0.0], atol=1e-12)
    clus = cluster_singleton(fed)
    sol2 = quadratic_analytic(task, fed, clus)
    assert np.allclose(sol2.per_cluster_f_star, sol.per_device_f_star, atol=1e-12)


def test_quadratic_analytic_agrees_with_direct_evaluation():
    fed = random_quad_federation(21, n_dev=5, dim=3, rows=6)
    task = TaskModel("quadratic", feature_dim=3)
    sol = quadratic_analytic(task, fed)
    loss, grad = global_loss_grad(task, fed, sol.w_star)
    assert abs(loss - sol.f_star) <= 1e-12 * max(1.0, abs(loss))
    assert np.linalg.norm(grad) <= 1e-12
    # any perturbation does worse
    worse, _ = global_loss_grad(task, fed, sol.w_star + 0.1)
    assert worse > sol.f_star


def test_quadratic_analytic_rejects_other_families():
    task, fed = class_federation(2, kind="softmax")
    with pytest.raises(UnsupportedTaskError):
        quadratic_analytic(task, fed)


def test_input_validation():
    task = TaskModel("softmax", feature_dim=3, n_classes=2)
    with pytest.raises(ConfigurationError):
        sample_loss(task, np.zeros(4), Sample(np.zeros(3), 0))
    with pytest.raises(ConfigurationError):
        sample_loss(task, np.zeros(task.param_dim), Sample(np.zeros(2), 0))
    with pytest.raises(ConfigurationError):
        sample_loss(task, np.zeros(task.param_dim), Sample(np.zeros(3), 5))
    with pytest.raises(ConfigurationError):
        TaskModel("mystery", feature_dim=3)
    with pytest.raises(ConfigurationError):
        TaskModel("softmax", feature_dim=0, n_classes=2)
    with pytest.raises(ConfigurationError):
        dataset_grad(task, np.zeros(task.param_dim),
                     np.zeros((4, 3)), np.array([0, 1, 0, -1], dtype=np.int64))
