"""Sample pools, IDX ingestion, and non-iid device partitioning.

A SamplePool groups samples by class. Federations are built by giving every
device a major class and drawing round(rho_device * S) of its S samples from
that class; the rest is split evenly over the other classes, with the
remainder after flooring assigned to the lowest class indices. rho_device is
the device-level heterogeneity knob: 1/n_classes is iid, 1.0 is single-class
devices.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .core import derive_stream
from .errors import ConfigurationError, IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class SamplePool:
    by_class: tuple
    n_classes: int
    feature_dim: int

    def class_sizes(self):
        return [arr.shape[0] for arr in self.by_class]


@dataclass(frozen=True)
class DeviceDataset:
    device_id: int
    X: np.ndarray
    y: np.ndarray
    major_class: int
    p_k: float

    @property
    def n(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class Federation:
    devices: tuple
    p: np.ndarray
    n_classes: int
    feature_dim: int

    @property
    def n(self):
        return len(self.devices)


@dataclass(frozen=True)
class PartitionConfig:
    n: int
    samples_per_device: int
    rho_device: float
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("partition.n must be >= 1")
        if self.samples_per_device < 1:
            raise ConfigurationError("partition.samples_per_device must be >= 1")
        if not 0.0 < self.rho_device <= 1.0:
            raise ConfigurationError("partition.rho_device must be in (0, 1]")


def synth_pool(n_classes, feature_dim, samples_per_class, spread, seed):
    """Gaussian class-conditional pool; class means have norm `spread`."""
    if n_classes < 1 or feature_dim < 1 or samples_per_class < 1:
        raise ConfigurationError("synth_pool counts must be positive")
    raw = derive_stream(seed, ("pool", "means")).gen.standard_normal((n_classes, feature_dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    means = spread * raw / norms
    by_class = []
    for c in range(n_classes):
        gen = derive_stream(seed, ("pool", "class", c)).gen
        by_class.append(means[c] + gen.standard_normal((samples_per_class, feature_dim)))
    return SamplePool(by_class=tuple(by_class), n_classes=n_classes, feature_dim=feature_dim)


def _read_idx_header(data, path, magic_want, n_dims):
    need = 4 + 4 * n_dims
    if len(data) < need:
        raise IngestionError(f"{path}: truncated IDX header", offset=len(data))
    fields = struct.unpack(">" + "I" * (1 + n_dims), data[:need])
    if fields[0] != magic_want:
        raise IngestionError(
            f"{path}: bad IDX magic 0x{fields[0]:08x}, want 0x{magic_want:08x}", offset=0
        )
    return fields[1:], need


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into a SamplePool; pixels scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lab_data = fh.read()

    (n_img, rows, cols), img_off = _read_idx_header(
        img_data, images_path, IDX_IMAGES_MAGIC, 3
    )
    (n_lab,), lab_off = _read_idx_header(lab_data, labels_path, IDX_LABELS_MAGIC, 1)

    img_need = img_off + n_img * rows * cols
    if len(img_data) < img_need:
        raise IngestionError(
            f"{images_path}: truncated, want {img_need} bytes", offset=len(img_data)
        )
    if len(img_data) > img_need:
        raise IngestionError(
            f"{images_path}: {len(img_data) - img_need} trailing bytes", offset=img_need
        )
    lab_need = lab_off + n_lab
    if len(lab_data) < lab_need:
        raise IngestionError(
            f"{labels_path}: truncated, want {lab_need} bytes", offset=len(lab_data)
        )
    if len(lab_data) > lab_need:
        raise IngestionError(
            f"{labels_path}: {len(lab_data) - lab_need} trailing bytes", offset=lab_need
        )
    if n_img != n_lab:
        raise IngestionError(
            f"image count {n_img} != label count {n_lab}", offset=4
        )
    if n_img == 0:
        raise IngestionError(f"{images_path}: no images", offset=4)

    feature_dim = rows * cols
    X = np.frombuffer(img_data, dtype=np.uint8, offset=img_off)
    X = X.reshape(n_img, feature_dim).astype(np.float64) / 255.0
    y = np.frombuffer(lab_data, dtype=np.uint8, offset=lab_off).astype(np.int64)
    n_classes = int(y.max()) + 1
    by_class = tuple(np.ascontiguousarray(X[y == c]) for c in range(n_classes))
    return SamplePool(by_class=by_class, n_classes=n_classes, feature_dim=feature_dim)


def class_counts(n_classes, total, major_class, major_count):
    """Per-class sample counts: major_count to the major class, the rest split
    evenly over the others, remainder to the lowest class indices."""
    counts = np.zeros(n_classes, dtype=np.int64)
    counts[major_class] = major_count
    rest = total - major_count
    others = [c for c in range(n_classes) if c != major_class]
    if others:
        base, rem = divmod(rest, len(others))
        for i, c in enumerate(others):
            counts[c] = base + (1 if i < rem else 0)
    elif rest:
        raise ConfigurationError("single-class pool needs rho_device = 1.0")
    return counts


def partition(pool, cfg):
    """Build a Federation from a pool per the major-class scheme.

    Devices draw samples with replacement from the class pools, so device
    datasets may overlap; every device k has its own derived stream
    (seed, ["partition", k]), which keeps construction order-independent.
    """
    ncls = pool.n_classes
    if cfg.n % ncls != 0:
        raise ConfigurationError(f"partition.n={cfg.n} not divisible by n_classes={ncls}")
    if cfg.rho_device < 1.0 / ncls - 1e-12:
        raise ConfigurationError(
            f"partition.rho_device={cfg.rho_device} below uniform share 1/{ncls}"
        )
    for c, size in enumerate(pool.class_sizes()):
        if size == 0:
            raise ConfigurationError(f"pool class {c} is empty")

    S = cfg.samples_per_device
    major_count = int(np.floor(cfg.rho_device * S + 0.5))
    if major_count > S:
        major_count = S
    per_major = cfg.n // ncls

    devices = []
    for k in range(cfg.n):
        major = k // per_major
        counts = class_counts(ncls, S, major, major_count)
        gen = derive_stream(cfg.seed, ("partition", k)).gen
        xs, ys = [], []
        for c in range(ncls):
            m = int(counts[c])
            if m == 0:
                continue
            rows = gen.integers(0, pool.by_class[c].shape[0], size=m)
            xs.append(pool.by_class[c][rows])
            ys.append(np.full(m, c, dtype=np.int64))
        devices.append((k, np.concatenate(xs), np.concatenate(ys), major))

    p = np.full(cfg.n, 1.0 / cfg.n)
    built = tuple(
        DeviceDataset(device_id=k, X=np.ascontiguousarray(X), y=y,
                      major_class=major, p_k=float(p[k]))
        for (k, X, y, major) in devices
    )
    return Federation(devices=built, p=p, n_classes=ncls, feature_dim=pool.feature_dim)


def build_federation(datasets, weights=None, n_classes=None):
    """Assemble a Federation directly from (X, y, major_class) triples.

    Weights default to dataset-size proportions. Intended for fixtures and
    analytic checks where the partitioning scheme would get in the way.
    """
    if not datasets:
        raise ConfigurationError("build_federation: no datasets")
    sizes = np.array([np.asarray(X).shape[0] for X, _, _ in datasets], dtype=np.float64)
    if weights is None:
        p = sizes / sizes.sum()
    else:
        p = np.asarray(weights, dtype=np.float64)
        if p.shape != (len(datasets),) or (p <= 0).any():
            raise ConfigurationError("build_federation: weights must be positive, one per dataset")
        if abs(float(p.sum()) - 1.0) > 1e-12:
            raise ConfigurationError("build_federation: weights must sum to 1")
    devices = []
    for k, (X, y, major) in enumerate(datasets):
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        devices.append(DeviceDataset(device_id=k, X=X, y=y,
                                     major_class=int(major), p_k=float(p[k])))
    feature_dim = devices[0].X.shape[1]
    if n_classes is None:
        n_classes = int(max(int(d.y.max()) for d in devices)) + 1
    return Federation(devices=tuple(devices), p=p, n_classes=n_classes,
                      feature_dim=feature_dim)
