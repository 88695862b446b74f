"""Synthetic datasets, stratified label splits, and two-view augmentation.

The desk-scale stand-in for a real benchmark is a seeded Gaussian mixture:
category centers are random unit vectors scaled by a separation factor,
points get unit isotropic noise. Splitting is stratified per category into
a labeled set, an unlabeled set, and a held-out test set. The unlabeled
split keeps its ground-truth labels on the Dataset (``role`` hides them
from the training path; the metrics path reads them to score pseudo-label
accuracy).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

ROLES = ("labeled", "unlabeled", "test")
AUG_KINDS = ("gaussian_noise", "coordinate_dropout", "random_crop_flip")


@dataclass
class Dataset:
    """Inputs plus (possibly withheld) category labels.

    ``labels`` is the retained ground truth and may be ``None`` for truly
    unlabeled data loaded from disk. Training code must go through
    ``visible_labels``, which yields ``None`` unless the role is
    ``labeled``; evaluation code may read ``labels`` directly.
    ``source_indices`` records positions in the parent dataset after a
    split, for bookkeeping tests.
    """

    inputs: np.ndarray
    labels: Optional[np.ndarray]
    num_categories: int
    role: str = "labeled"
    source_indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.num_categories < 2:
            raise ValueError(
                f"need at least 2 categories, got {self.num_categories}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise ValueError("labels must be one index per input row")
            if len(self.labels) and (
                    self.labels.min() < 0
                    or self.labels.max() >= self.num_categories):
                raise ValueError(
                    f"labels must lie in [0, {self.num_categories})")

    def __len__(self):
        return len(self.inputs)

    @property
    def visible_labels(self) -> Optional[np.ndarray]:
        """Labels as the training loop is allowed to see them."""
        if self.role == "labeled":
            return self.labels
        return None

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])


class SplitData(NamedTuple):
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset


def make_gaussian_mixture(num_categories: int, dim: int, per_class: int,
                          separation: float, seed: int = 0) -> Dataset:
    """Balanced mixture of ``num_categories`` unit-noise Gaussians.

    Centers are seeded random unit vectors scaled by ``separation``; each
    category contributes ``per_class`` points ``center + N(0, I)``.
    """
    if num_categories < 2:
        raise ValueError(f"need at least 2 categories, got {num_categories}")
    if dim < 1 or per_class < 1:
        raise ValueError(f"dim and per_class must be positive, got "
                         f"dim={dim}, per_class={per_class}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_categories, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    points = np.repeat(centers, per_class, axis=0) + \
        rng.standard_normal((num_categories * per_class, dim))
    labels = np.repeat(np.arange(num_categories), per_class)
    return Dataset(points.astype(np.float32), labels, num_categories,
                   role="labeled")


def _stratified_indices(labels: np.ndarray, num_categories: int,
                        rng: np.random.Generator):
    """Per-category index arrays, each shuffled by ``rng``."""
    per_cat = []
    for c in range(num_categories):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"category {c} has no examples to split")
        rng.shuffle(idx)
        per_cat.append(idx)
    return per_cat


def _take(data: Dataset, indices: np.ndarray, role: str) -> Dataset:
    indices = np.sort(indices)
    return Dataset(data.inputs[indices], data.labels[indices],
                   data.num_categories, role=role, source_indices=indices)


def _split_by_counts(data: Dataset, labeled_counts, test_fraction: float,
                     rng: np.random.Generator) -> SplitData:
    labeled_idx, unlabeled_idx, test_idx = [], [], []
    for c, idx in enumerate(
            _stratified_indices(data.labels, data.num_categories, rng)):
        n_c = len(idx)
        n_test = int(np.floor(test_fraction * n_c))
        pool = idx[:n_c - n_test]
        n_lab = labeled_counts(c, n_c, len(pool))
        labeled_idx.append(pool[:n_lab])
        unlabeled_idx.append(pool[n_lab:])
        test_idx.append(idx[n_c - n_test:])
    return SplitData(
        _take(data, np.concatenate(labeled_idx), "labeled"),
        _take(data, np.concatenate(unlabeled_idx), "unlabeled"),
        _take(data, np.concatenate(test_idx), "test"),
    )


def split_label_proportion(data: Dataset, proportion: float,
                           test_fraction: float, seed: int = 0) -> SplitData:
    """Stratified (labeled, unlabeled, test) split at a label proportion.

    Per category with n_c examples: floor(test_fraction * n_c) go to test,
    and floor(proportion * n_c) of the remainder (at least 1, at most the
    whole remainder) keep their labels. The floor is taken over the full
    per-category count, not the post-test pool, so the advertised labeled
    count does not drift with the test fraction. proportion 1.0 empties the
    unlabeled split, recovering plain supervised fine-tuning.
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"proportion must be in (0, 1], got {proportion}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(
            f"test_fraction must be in (0, 1), got {test_fraction}")
    if data.labels is None:
        raise ValueError("cannot split a dataset without labels")
    rng = np.random.default_rng(seed)

    def counts(c, n_c, pool_c):
        return min(pool_c, max(1, int(np.floor(proportion * n_c))))

    return _split_by_counts(data, counts, test_fraction, rng)


def split_per_class_count(data: Dataset, per_class: int, test_fraction: float,
                          seed: int = 0) -> SplitData:
    """Like ``split_label_proportion`` but with exactly ``per_class`` labels
    in every category."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(
            f"test_fraction must be in (0, 1), got {test_fraction}")
    if data.labels is None:
        raise ValueError("cannot split a dataset without labels")
    rng = np.random.default_rng(seed)

    def counts(c, n_c, pool_c):
        if per_class > pool_c:
            raise ValueError(
                f"category {c}: requested {per_class} labels but only "
                f"{pool_c} examples remain outside the test split")
        return per_class

    return _split_by_counts(data, counts, test_fraction, rng)


@dataclass
class AugmentationPolicy:
    """Seeded stochastic view transform.

    kinds: ``gaussian_noise`` adds ``strength * N(0, I)``;
    ``coordinate_dropout`` zeroes each coordinate with probability
    ``strength``; ``random_crop_flip`` shifts (c, h, w) images by up to
    ``int(strength)`` pixels with zero padding and mirrors them with
    probability 1/2. Strength 0 returns the input bit-for-bit and draws
    nothing from the stream, so a disabled policy never perturbs
    downstream randomness.
    """

    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"kind must be one of {AUG_KINDS}, "
                             f"got {self.kind!r}")
        if self.strength < 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if self.kind == "coordinate_dropout" and self.strength > 1:
            raise ValueError("coordinate_dropout strength is a probability")
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform a batch (leading axis = examples)."""
        x = np.asarray(x, dtype=np.float32)
        if self.strength == 0:
            return x.copy()
        if self.kind == "gaussian_noise":
            noise = self._rng.standard_normal(x.shape).astype(np.float32)
            return x + self.strength * noise
        if self.kind == "coordinate_dropout":
            keep = self._rng.random(x.shape) >= self.strength
            return x * keep.astype(np.float32)
        return self._crop_flip(x)

    def _crop_flip(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ValueError(
                f"random_crop_flip needs (n, c, h, w) input, got shape "
                f"{x.shape}")
        pad = int(self.strength)
        n, _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(x)
        offsets = self._rng.integers(0, 2 * pad + 1, size=(n, 2))
        flips = self._rng.random(n) < 0.5
        for i in range(n):
            dy, dx = offsets[i]
            view = padded[i, :, dy:dy + h, dx:dx + w]
            out[i] = view[:, :, ::-1] if flips[i] else view
        return out


def two_views(policy1: AugmentationPolicy, policy2: AugmentationPolicy,
              x: np.ndarray):
    """The (query view, key view) pair of a batch."""
    return policy1.apply(x), policy2.apply(x)


# ---------------------------------------------------------------------------
# On-disk formats. Vector data: CSV with d feature columns and one label
# column (-1 = unknown). Image data: a directory of files, each an ASCII
# header line "c h w label" followed by c*h*w raw bytes, row-major.
# ---------------------------------------------------------------------------

def save_csv(data: Dataset, path):
    if data.inputs.ndim != 2:
        raise ValueError("CSV export handles flat vector datasets only")
    d = data.inputs.shape[1]
    labels = data.labels if data.labels is not None else \
        np.full(len(data), -1, dtype=np.int64)
    with open(path, "w", newline="") as fh:
        fh.write(",".join([f"feat_{i}" for i in range(d)] + ["label"]) + "\n")
        for row, lab in zip(data.inputs, labels):
            fh.write(",".join(repr(float(v)) for v in row) +
                     f",{int(lab)}\n")


def load_csv(path, num_categories: int, role: str = "labeled") -> Dataset:
    raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    raw = raw.reshape(-1, raw.shape[-1])
    inputs = raw[:, :-1].astype(np.float32)
    labels = raw[:, -1].astype(np.int64)
    if (labels == -1).all():
        return Dataset(inputs, None, num_categories, role=role)
    if (labels == -1).any():
        raise ValueError(f"{path}: mixes labeled and -1 rows; split the "
                         "file by role instead")
    return Dataset(inputs, labels, num_categories, role=role)


def save_image_dir(data: Dataset, path):
    if data.inputs.ndim != 4:
        raise ValueError("image export needs (n, c, h, w) inputs")
    os.makedirs(path, exist_ok=True)
    labels = data.labels if data.labels is not None else \
        np.full(len(data), -1, dtype=np.int64)
    c, h, w = data.input_shape
    for i, (img, lab) in enumerate(zip(data.inputs, labels)):
        raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        with open(os.path.join(path, f"{i:06d}.img"), "wb") as fh:
            fh.write(f"{c} {h} {w} {int(lab)}\n".encode())
            fh.write(raw.tobytes())


def load_image_dir(path, num_categories: int, role: str = "labeled") -> Dataset:
    names = sorted(n for n in os.listdir(path) if n.endswith(".img"))
    if not names:
        raise ValueError(f"{path}: no .img files found")
    images, labels = [], []
    for name in names:
        with open(os.path.join(path, name), "rb") as fh:
            header = fh.readline().split()
            if len(header) != 4:
                raise ValueError(f"{name}: malformed header")
            c, h, w, lab = (int(v) for v in header)
            raw = np.frombuffer(fh.read(), dtype=np.uint8, count=c * h * w)
            images.append((raw.reshape(c, h, w).astype(np.float32) / 255.0))
            labels.append(lab)
    labels = np.asarray(labels, dtype=np.int64)
    inputs = np.stack(images)
    if (labels == -1).all():
        return Dataset(inputs, None, num_categories, role=role)
    if (labels == -1).any():
        raise ValueError(f"{path}: mixes labeled and -1 images")
    return Dataset(inputs, labels, num_categories, role=role)
