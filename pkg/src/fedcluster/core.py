"""Deterministic numeric primitives: seeded RNG streams and order-fixed reductions.

Every random draw in the package flows through an RngStream derived from a
64-bit master seed and a path of labels (round, cycle, device, step). Streams
with distinct paths are statistically independent, and equal (seed, path)
pairs always replay the same sequence. That property is what makes runs
bit-reproducible regardless of how work is spread over threads: each unit of
work derives its own stream instead of sharing generator state.
"""

import hashlib

import numpy as np

from .errors import ConfigurationError

_MASK64 = (1 << 64) - 1


def _encode_path(path):
    # i:<n>; for ints, s:<text>; for strings. The tag plus terminator keeps
    # the encoding injective, so distinct paths never collide.
    parts = []
    for label in path:
        if isinstance(label, bool):
            raise ConfigurationError(f"rng path label {label!r}: bool is ambiguous, use int or str")
        if isinstance(label, (int, np.integer)):
            parts.append(b"i:%d;" % int(label))
        elif isinstance(label, str):
            parts.append(b"s:" + label.encode("utf-8") + b";")
        else:
            raise ConfigurationError(f"rng path label {label!r}: want int or str")
    return b"".join(parts)


class RngStream:
    """A numpy Generator whose initial state is a pure function of (master_seed, path).

    The path is hashed with blake2b keyed by the seed, and the 128-bit digest
    keys a counter-based Philox generator. Drawing from one stream never
    affects any other, so streams are safe to create and consume in worker
    threads.
    """

    __slots__ = ("master_seed", "path", "gen")

    def __init__(self, master_seed, path):
        if not path:
            raise ConfigurationError("rng stream path must be non-empty")
        seed = int(master_seed) & _MASK64
        self.master_seed = seed
        self.path = tuple(path)
        digest = hashlib.blake2b(
            _encode_path(self.path),
            key=seed.to_bytes(8, "little"),
            digest_size=16,
        ).digest()
        self.gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def child(self, *labels):
        """Derive the stream for an extended path; this stream's state is untouched."""
        return RngStream(self.master_seed, self.path + labels)

    def __repr__(self):
        return f"RngStream(seed={self.master_seed}, path={self.path!r})"


def derive_stream(master_seed, path):
    """Return the RngStream for (master_seed, path); path is a non-empty label list."""
    return RngStream(master_seed, path)


def weighted_sum(vectors, weights):
    """Componentwise sum of weights[i] * vectors[i], accumulated in ascending index order.

    The fixed accumulation order makes the result bit-identical whether the
    vectors were produced serially or by a worker pool.
    """
    if len(vectors) == 0:
        raise ConfigurationError("weighted_sum: empty vector list")
    if len(weights) != len(vectors):
        raise ConfigurationError(
            f"weighted_sum: {len(vectors)} vectors but {len(weights)} weights"
        )
    first = np.asarray(vectors[0], dtype=np.float64)
    dim = first.shape
    if not np.isfinite(float(weights[0])):
        raise ConfigurationError("weighted_sum: weight 0 is not finite")
    out = first * float(weights[0])
    for i in range(1, len(vectors)):
        v = np.asarray(vectors[i], dtype=np.float64)
        if v.shape != dim:
            raise ConfigurationError(
                f"weighted_sum: vector {i} has shape {v.shape}, expected {dim}"
            )
        w = float(weights[i])
        if not np.isfinite(w):
            raise ConfigurationError(f"weighted_sum: weight {i} is not finite")
        out += v * w
    return out


def sq_norm(v):
    """Squared Euclidean norm as a Python float."""
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(v @ v)
