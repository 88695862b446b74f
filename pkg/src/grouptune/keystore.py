"""Class-partitioned FIFO store of key embeddings.

One fixed-size queue of unit-norm key vectors per category, all backed by a
single ``C x D x L`` array. Both the labeled and unlabeled training streams
push freshly encoded keys into the same store (routed by label or
pseudo-label); the oldest key of the target category is overwritten. Total
capacity is ``C * D`` and never changes after construction.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"GTKS"
_NORM_TOL = 1e-6


class KeyStore:
    """Per-category bounded FIFO of key embeddings.

    Slots are initialized with seeded random unit vectors so that retrieval
    is well-defined (and contrast terms finite) before any real key has been
    pushed. Each category keeps a cursor marking its oldest slot, which is
    the next one to be overwritten.
    """

    def __init__(self, num_categories, keys_per_category, key_dim, seed=0,
                 normalize=True):
        if num_categories < 2:
            raise ValueError(f"num_categories must be >= 2, got {num_categories}")
        if keys_per_category < 1:
            raise ValueError(f"keys_per_category must be >= 1, got {keys_per_category}")
        if key_dim < 1:
            raise ValueError(f"key_dim must be >= 1, got {key_dim}")
        self.num_categories = int(num_categories)
        self.keys_per_category = int(keys_per_category)
        self.key_dim = int(key_dim)
        self.normalize = bool(normalize)

        rng = np.random.default_rng(seed)
        slots = rng.standard_normal(
            (self.num_categories, self.keys_per_category, self.key_dim))
        norms = np.linalg.norm(slots, axis=-1, keepdims=True)
        self.slots = (slots / norms).astype(np.float32)
        self.cursor = np.zeros(self.num_categories, dtype=np.int64)
        self.enqueue_count = 0  # lifetime total, for bookkeeping checks

    @property
    def capacity(self):
        return self.num_categories * self.keys_per_category

    def _check_category(self, category):
        if not 0 <= category < self.num_categories:
            raise ValueError(
                f"category {category} out of range [0, {self.num_categories})")

    def enqueue(self, category, key):
        """Write ``key`` into the oldest slot of ``category`` (FIFO).

        The key is L2-normalized before storage (unless the store was built
        with ``normalize=False``); the category cursor then advances modulo
        the per-category capacity. No other slot is touched.
        """
        self._check_category(category)
        key = np.asarray(key, dtype=np.float32)
        if key.shape != (self.key_dim,):
            raise ValueError(
                f"key has shape {key.shape}, expected ({self.key_dim},)")
        if self.normalize:
            norm = float(np.linalg.norm(key.astype(np.float64)))
            if norm == 0.0:
                raise ValueError("cannot normalize a zero-norm key")
            key = (key.astype(np.float64) / norm).astype(np.float32)
        cur = self.cursor[category]
        self.slots[category, cur] = key
        self.cursor[category] = (cur + 1) % self.keys_per_category
        self.enqueue_count += 1

    def enqueue_batch(self, categories, keys):
        """Enqueue several keys in order; equivalent to repeated enqueues."""
        categories = np.asarray(categories)
        keys = np.asarray(keys, dtype=np.float32)
        if len(categories) != len(keys):
            raise ValueError("categories and keys length mismatch")
        for cat, key in zip(categories, keys):
            self.enqueue(int(cat), key)

    def positives(self, category):
        """Keys of ``category``, oldest first / newest last, as a copy.

        The returned array is a snapshot: later enqueues do not affect it.
        """
        self._check_category(category)
        cur = self.cursor[category]
        return np.roll(self.slots[category], -cur, axis=0).copy()

    def negatives(self, category):
        """All keys of every other category, concatenated in category order.

        Shape is ``(D * (C - 1), L)``; within each category the keys appear
        oldest first. Snapshot semantics as for :meth:`positives`.
        """
        self._check_category(category)
        parts = [self.positives(c) for c in range(self.num_categories)
                 if c != category]
        return np.concatenate(parts, axis=0)

    def snapshot(self):
        """Copy of the full ``(C, D, L)`` slot array (raw slot order)."""
        return self.slots.copy()

    def save(self, path):
        """Write the store as a flat binary blob.

        Layout: little-endian int32 header ``(C, D, L)``, then ``C*D*L``
        little-endian float32 slot values in category-major slot-major
        order, then ``C`` little-endian int32 cursors.
        """
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<3i", self.num_categories,
                                 self.keys_per_category, self.key_dim))
            fh.write(self.slots.astype("<f4").tobytes(order="C"))
            fh.write(self.cursor.astype("<i4").tobytes())

    @classmethod
    def load(cls, path, normalize=True):
        """Rebuild a store from a blob written by :meth:`save`."""
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ValueError(f"not a key-store blob: bad magic {magic!r}")
            c, d, ell = struct.unpack("<3i", fh.read(12))
            slots = np.frombuffer(fh.read(c * d * ell * 4), dtype="<f4")
            cursor = np.frombuffer(fh.read(c * 4), dtype="<i4")
        store = cls(c, d, ell, seed=0, normalize=normalize)
        store.slots = slots.reshape(c, d, ell).astype(np.float32).copy()
        store.cursor = cursor.astype(np.int64).copy()
        return store

    def check_invariants(self):
        """Assert unit norms and cursor ranges; used by tests."""
        norms = np.linalg.norm(self.slots.astype(np.float64), axis=-1)
        if self.normalize and not np.all(np.abs(norms - 1.0) <= _NORM_TOL):
            raise AssertionError("stored key norms drifted from 1")
        if not np.all((self.cursor >= 0) & (self.cursor < self.keys_per_category)):
            raise AssertionError("cursor out of range")

    def __repr__(self):
        return (f"KeyStore(C={self.num_categories}, D={self.keys_per_category}, "
                f"L={self.key_dim})")
