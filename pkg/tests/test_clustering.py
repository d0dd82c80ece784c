import numpy as np
import pytest

from conftest import random_quad_federation, two_point_federation
from fedcluster.clustering import (
    attach_gamma, cluster_major_class, cluster_random_uniform,
    cluster_singleton, default_probes, estimate_Gamma, estimate_H,
    make_clustering,
)
from fedcluster.core import derive_stream
from fedcluster.errors import ConfigurationError
from fedcluster.fedsets import PartitionConfig, partition, synth_pool
from fedcluster.tasks import TaskModel


def test_make_clustering_checks():
    fed = random_quad_federation(1, n_dev=6)
    clus = make_clustering(fed, np.array([0, 0, 1, 1, 2, 2]), 3)
    assert clus.M == 3
    assert abs(float(clus.q.sum()) - 1.0) <= 1e-9
    assert sorted(int(k) for K in range(3) for k in clus.members(K)) == list(range(6))
    with pytest.raises(ConfigurationError):
        make_clustering(fed, np.array([0, 0, 1, 1, 2, 2]), 4)  # empty cluster
    with pytest.raises(ConfigurationError):
        make_clustering(fed, np.array([0, 0, 1, 1, 2, 5]), 3)  # id out of range
    with pytest.raises(ConfigurationError):
        make_clustering(fed, np.array([0, 0, 1]), 2)  # wrong length


def test_random_uniform_sizes_and_determinism():
    fed = random_quad_federation(2, n_dev=12)
    a = cluster_random_uniform(fed, 4, seed=7)
    b = cluster_random_uniform(fed, 4, seed=7)
    c = cluster_random_uniform(fed, 4, seed=8)
    assert np.array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, c.assignment)
    assert all(a.members(K).size == 3 for K in range(4))
    with pytest.raises(ConfigurationError):
        cluster_random_uniform(fed, 5, seed=0)


def test_random_uniform_is_uniform_over_seeds():
    # with 10 clusters of 2, each device should land in any given cluster
    # about a tenth of the time
    fed = random_quad_federation(3, n_dev=20, dim=2, rows=2)
    hits = np.zeros(10)
    trials = 2000
    for s in range(trials):
        clus = cluster_random_uniform(fed, 10, seed=s)
        hits[int(clus.assignment[0])] += 1
    freqs = hits / trials
    assert np.abs(freqs - 0.1).max() <= 0.03


def _class_balanced_federation(n=12, ncls=3):
    pool = synth_pool(n_classes=ncls, feature_dim=4, samples_per_class=60,
                      spread=2.0, seed=4)
    return partition(pool, PartitionConfig(n=n, samples_per_device=6,
                                           rho_device=0.8, seed=4))


def test_major_class_composition():
    fed = _class_balanced_federation()
    full = cluster_major_class(fed, 3, rho_cluster=1.0, seed=0)
    for K in range(3):
        majors = [int(fed.devices[int(k)].major_class) for k in full.members(K)]
        assert majors == [K] * 4
    half = cluster_major_class(fed, 3, rho_cluster=0.5, seed=0)
    for K in range(3):
        majors = [int(fed.devices[int(k)].major_class) for k in half.members(K)]
        # floor(0.5 * 4 + 0.5) = 2 same-class slots, the rest split evenly
        assert sum(1 for m in majors if m == K) == 2
        assert len(majors) == 4
    both = sorted(int(k) for K in range(3) for k in half.members(K))
    assert both == list(range(12))


def test_major_class_determinism_and_errors():
    fed = _class_balanced_federation()
    a = cluster_major_class(fed, 3, rho_cluster=0.5, seed=9)
    b = cluster_major_class(fed, 3, rho_cluster=0.5, seed=9)
    assert np.array_equal(a.assignment, b.assignment)
    with pytest.raises(ConfigurationError):
        cluster_major_class(fed, 5, rho_cluster=0.5, seed=0)  # 5 does not divide 12
    with pytest.raises(ConfigurationError):
        cluster_major_class(fed, 6, rho_cluster=0.5, seed=0)  # more clusters than classes
    with pytest.raises(ConfigurationError):
        cluster_major_class(fed, 3, rho_cluster=1.5, seed=0)


def test_major_class_supply_exhaustion_is_reported():
    # 8 devices but 6 of them share major class 0: demanding fully
    # homogeneous clusters for class 1 must fail with a clear message
    pool = synth_pool(n_classes=2, feature_dim=3, samples_per_class=80,
                      spread=2.0, seed=2)
    fed = partition(pool, PartitionConfig(n=8, samples_per_device=4,
                                          rho_device=0.9, seed=2))
    devs = list(fed.devices)
    from fedcluster.fedsets import build_federation
    datasets = [(d.X, d.y, 0 if k < 6 else 1) for k, d in enumerate(devs)]
    skew = build_federation(datasets, n_classes=2)
    with pytest.raises(ConfigurationError, match="class"):
        cluster_major_class(skew, 2, rho_cluster=1.0, seed=0)


def test_singleton_clustering():
    fed = random_quad_federation(5, n_dev=4)
    clus = cluster_singleton(fed)
    assert clus.M == 4
    assert np.array_equal(clus.q, fed.p)
    assert list(clus.assignment) == [0, 1, 2, 3]


def test_dispersion_two_point_fixture():
    fed = two_point_federation()
    task = TaskModel("quadratic", feature_dim=1)
    clus = cluster_singleton(fed)
    probes = default_probes(task, seed=0, count=8)
    rep = estimate_H(task, fed, clus, probes)
    assert abs(rep.H_device_hat - 1.0) <= 1e-10
    assert abs(rep.H_cluster_hat - 1.0) <= 1e-10
    rep = attach_gamma(rep, task, fed, clus)
    assert abs(rep.Gamma_device_hat - 0.5) <= 1e-10
    assert abs(rep.Gamma_cluster_hat - 0.5) <= 1e-10
    # grouping the two devices into one cluster removes all dispersion
    merged = make_clustering(fed, np.zeros(2, dtype=np.int64), 1)
    rep1 = attach_gamma(estimate_H(task, fed, merged, probes), task, fed, merged)
    assert abs(rep1.H_cluster_hat) <= 1e-12
    assert abs(rep1.Gamma_cluster_hat) <= 1e-12
    assert abs(rep1.H_device_hat - 1.0) <= 1e-10


def test_grouping_never_increases_dispersion():
    task = TaskModel("quadratic", feature_dim=3)
    fed = random_quad_federation(6, n_dev=12, dim=3, rows=5)
    probes = default_probes(task, seed=1, count=6)
    meta = np.random.default_rng(0)
    for _ in range(100):
        M = int(meta.integers(1, 7))
        assignment = meta.integers(0, M, size=12)
        while len(set(assignment.tolist())) < M:
            assignment = meta.integers(0, M, size=12)
        clus = make_clustering(fed, assignment, M)
        rep = attach_gamma(estimate_H(task, fed, clus, probes), task, fed, clus)
        assert rep.H_cluster_hat <= rep.H_device_hat + 1e-9
        assert rep.Gamma_cluster_hat <= rep.Gamma_device_hat + 1e-9
        assert rep.H_cluster_hat >= -1e-12
        assert rep.Gamma_cluster_hat >= -1e-12


def test_gamma_estimate_matches_definition():
    task = TaskModel("quadratic", feature_dim=2)
    fed = random_quad_federation(7, n_dev=6, dim=2, rows=4)
    clus = cluster_random_uniform(fed, 3, seed=0)
    from fedcluster.tasks import quadratic_analytic
    sol = quadratic_analytic(task, fed, clus)
    dev_gap, clus_gap = estimate_Gamma(task, fed, clus)
    want_dev = sol.f_star - float(np.dot(fed.p, sol.per_device_f_star))
    want_clus = sol.f_star - float(np.dot(clus.q, sol.per_cluster_f_star))
    assert abs(dev_gap - want_dev) <= 1e-12
    assert abs(clus_gap - want_clus) <= 1e-12


def test_probe_count_flows_into_report():
    fed = two_point_federation()
    task = TaskModel("quadratic", feature_dim=1)
    probes = default_probes(task, seed=3, count=5)
    rep = estimate_H(task, fed, cluster_singleton(fed), probes)
    assert rep.n_probes == len(probes)
    a = default_probes(task, seed=3, count=5)
    b = default_probes(task, seed=3, count=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
