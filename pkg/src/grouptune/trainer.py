"""Training loops: the unified objective, its baselines, and harnesses.

One ``train_step`` serves four methods:

* ``self_tuning``: CE on raw labeled inputs, group contrast on labeled
  queries grouped by ground truth, group contrast on unlabeled queries
  grouped by their pseudo-labels. Both streams enqueue their keys into a
  shared class-partitioned store (two distinct stores under
  ``separate_queues``). No confidence threshold anywhere.
* ``pseudo_label_ce``: CE on labeled inputs plus thresholded self-training
  CE on unlabeled predictions.
* ``contrastive_cl``: CE on labeled inputs plus instance contrast on
  unlabeled pairs, with every key in the store as a negative (the store
  partition is ignored on the negative side).
* ``fine_tune_only``: CE on labeled inputs, nothing else.

Ablation flags remove the labeled or unlabeled group-contrast term from
``self_tuning``; the streams still feed the key store so the surviving
term keeps exploring both pools. With both terms removed the step skips
the contrastive machinery entirely and is bit-identical to a
``fine_tune_only`` step under the same seed.

Determinism: every random choice (parameter init, shuffling, augmentation,
store init) derives from ``TrainConfig.seed``, so equal configs produce
equal reports, byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .datagen import AugmentationPolicy, Dataset, SplitData
from .keystore import KeyStore
from .model import ModelBundle, make_bundle, read_checkpoint_records

METHODS = ("self_tuning", "pseudo_label_ce", "contrastive_cl",
           "fine_tune_only")


@dataclass
class TrainConfig:
    temperature: float = 0.07
    keys_per_category: int = 32
    projector_dim: int = 64
    base_lr: float = 0.001
    classifier_lr_multiplier: float = 10.0
    sgd_momentum: float = 0.9
    momentum_encoder: Optional[float] = 0.999   # None turns the slow branch off
    labeled_batch_size: int = 16
    unlabeled_batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    method: str = "self_tuning"
    disable_pgc_labeled: bool = False
    disable_pgc_unlabeled: bool = False
    separate_queues: bool = False
    threshold: float = 0.95                     # baselines only
    weight_decay: float = 0.0
    normalize_keys: bool = True
    feature_dim: int = 64
    hidden_dims: Sequence[int] = (128,)
    conv_width: int = 16
    freeze_encoder: bool = False
    augment_kind: str = "gaussian_noise"
    aug_strength_query: float = 0.1
    aug_strength_key: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.keys_per_category < 1:
            raise ValueError(
                f"keys_per_category must be >= 1, got {self.keys_per_category}")
        if self.projector_dim < 1:
            raise ValueError(
                f"projector_dim must be >= 1, got {self.projector_dim}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not self.classifier_lr_multiplier > 0:
            raise ValueError("classifier_lr_multiplier must be > 0")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError(f"sgd_momentum must be in [0, 1), got "
                             f"{self.sgd_momentum}")
        if self.momentum_encoder is not None and \
                not 0.0 <= self.momentum_encoder < 1.0:
            raise ValueError(f"momentum_encoder must be None or in [0, 1), "
                             f"got {self.momentum_encoder}")
        if self.labeled_batch_size < 1 or self.unlabeled_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, "
                             f"got {self.method!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got "
                             f"{self.threshold}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got "
                             f"{self.weight_decay}")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


@dataclass
class EpochRow:
    epoch: int
    loss_ce: float
    loss_pgc_labeled: float
    loss_pgc_unlabeled: float
    test_accuracy: float
    pseudo_label_accuracy: float
    pseudo_coverage: float


CSV_COLUMNS = ("epoch", "loss_ce", "loss_pgc_labeled", "loss_pgc_unlabeled",
               "test_accuracy", "pseudo_label_accuracy", "pseudo_coverage")


@dataclass
class TrainReport:
    rows: list
    summary: dict = field(default_factory=dict)

    def tolerance_gaps(self):
        """Per-epoch test_accuracy - pseudo_label_accuracy."""
        return [r.test_accuracy - r.pseudo_label_accuracy for r in self.rows]

    def final_test_accuracy(self):
        return self.rows[-1].test_accuracy

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.epoch] + [
                repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_string())


def report_from_csv(path) -> TrainReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = [EpochRow(int(vals[0]), *(float(v) for v in vals[1:]))
                for vals in reader]
    if not rows:
        raise ValueError(f"{path}: no epoch rows")
    return TrainReport(rows)


class _Cycler:
    """Endless shuffled index stream; reshuffles whenever exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(count, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            count -= grab
        return np.concatenate(out)


def _uses_contrast(config: TrainConfig) -> bool:
    if config.method == "contrastive_cl":
        return True
    return config.method == "self_tuning" and not (
        config.disable_pgc_labeled and config.disable_pgc_unlabeled)


def _uses_unlabeled(config: TrainConfig) -> bool:
    if config.method == "fine_tune_only":
        return False
    if config.method == "self_tuning":
        return _uses_contrast(config)
    return True


def make_stores(config: TrainConfig, num_categories: int, seed_l: int,
                seed_u: int):
    """(labeled store, unlabeled store): one shared object, or two under
    ``separate_queues``. None when the method never touches a store."""
    if not _uses_contrast(config):
        return None
    store_l = KeyStore(num_categories, config.keys_per_category,
                       config.projector_dim, seed=seed_l,
                       normalize=config.normalize_keys)
    if config.separate_queues:
        store_u = KeyStore(num_categories, config.keys_per_category,
                           config.projector_dim, seed=seed_u,
                           normalize=config.normalize_keys)
    else:
        store_u = store_l
    return store_l, store_u


def _snapshot_tensor(store: KeyStore) -> torch.Tensor:
    return torch.from_numpy(store.snapshot())


def make_optimizer(bundle: ModelBundle, config: TrainConfig):
    return torch.optim.SGD(
        bundle.optimizer_groups(config.base_lr,
                                config.classifier_lr_multiplier),
        lr=config.base_lr, momentum=config.sgd_momentum,
        weight_decay=config.weight_decay)


def _identity_augs(config: TrainConfig):
    return (AugmentationPolicy(config.augment_kind, 0.0, seed=0),
            AugmentationPolicy(config.augment_kind, 0.0, seed=0))


def train_step(bundle: ModelBundle, stores, labeled_batch, unlabeled_batch,
               config: TrainConfig, optimizer=None, augs=None) -> L.LossReport:
    """One optimizer step on the method's objective. Mutates ``bundle`` and
    ``stores`` in place and returns the step's loss report.

    ``labeled_batch`` is ``(inputs, labels)`` as numpy arrays,
    ``unlabeled_batch`` a numpy array or None. ``optimizer``/``augs``
    default to a fresh SGD and identity views, which suits single-step
    tests; the epoch loop passes persistent ones.
    """
    x_l, y_l = labeled_batch
    if x_l is None or len(x_l) == 0:
        raise ValueError("labeled batch is empty but the CE term needs it")
    if optimizer is None:
        optimizer = make_optimizer(bundle, config)
    aug_query, aug_key = augs if augs is not None else _identity_augs(config)

    x_l = np.asarray(x_l, dtype=np.float32)
    y_l_t = torch.from_numpy(np.asarray(y_l, dtype=np.int64))
    have_u = unlabeled_batch is not None and len(unlabeled_batch) > 0
    method = config.method

    use_pgc_l = (method == "self_tuning" and not config.disable_pgc_labeled)
    use_pgc_u = (method == "self_tuning" and not config.disable_pgc_unlabeled
                 and have_u)
    contrast = _uses_contrast(config)

    probs_l = bundle.predict_probs(torch.from_numpy(x_l))
    ce = L.cross_entropy_batch(probs_l, y_l_t).mean()

    pgc_l = ce.new_zeros(())
    pgc_u = ce.new_zeros(())
    baseline = ce.new_zeros(())
    coverage = 0.0
    enqueue_later = []

    if contrast:
        store_l, store_u = stores
        view1_l, view2_l = aug_query.apply(x_l), aug_key.apply(x_l)
        k_l = bundle.encode_key(torch.from_numpy(view2_l))
        if use_pgc_l:
            q_l = bundle.encode_query(torch.from_numpy(view1_l))
            pgc_l = L.group_contrast_batch(
                q_l, k_l, y_l_t, _snapshot_tensor(store_l),
                config.temperature).mean()
        enqueue_later.append((store_l, np.asarray(y_l, dtype=np.int64), k_l))
        if have_u:
            x_u = np.asarray(unlabeled_batch, dtype=np.float32)
            view1_u, view2_u = aug_query.apply(x_u), aug_key.apply(x_u)
            view1_u_t = torch.from_numpy(view1_u)
            cats_u, _ = bundle.pseudo_label_batch(view1_u_t)
            k_u = bundle.encode_key(torch.from_numpy(view2_u))
            if use_pgc_u:
                q_u = bundle.encode_query(view1_u_t)
                pgc_u = L.group_contrast_batch(
                    q_u, k_u, cats_u, _snapshot_tensor(store_u),
                    config.temperature).mean()
                coverage = 1.0
            elif method == "contrastive_cl":
                q_u = bundle.encode_query(view1_u_t)
                baseline = L.info_nce_batch(
                    q_u, k_u, _snapshot_tensor(store_u),
                    config.temperature).mean()
                coverage = 1.0
            enqueue_later.append((store_u, cats_u.numpy(), k_u))
        total = L.total_objective(ce, pgc_l, pgc_u,
                                  include_pgc_labeled=use_pgc_l,
                                  include_pgc_unlabeled=use_pgc_u)
        if method == "contrastive_cl":
            total = total + baseline
    elif method == "pseudo_label_ce" and have_u:
        x_u = np.asarray(unlabeled_batch, dtype=np.float32)
        view1_u = aug_query.apply(x_u)
        probs_u = bundle.predict_probs(torch.from_numpy(view1_u))
        u_losses, passed, _ = L.pseudo_ce_batch(probs_u, config.threshold)
        baseline = u_losses.mean()
        coverage = float(passed.float().mean())
        total = ce + baseline
    else:
        total = ce

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    bundle.momentum_update()
    for store, cats, keys in enqueue_later:
        store.enqueue_batch(cats, keys.numpy().astype(np.float32))

    return L.LossReport(
        ce=float(ce.detach()), pgc_labeled=float(pgc_l.detach()),
        pgc_unlabeled=float(pgc_u.detach()), total=float(total.detach()),
        pseudo_coverage=coverage,
        unlabeled_baseline=float(baseline.detach()))


def _predict_categories(bundle: ModelBundle, inputs: np.ndarray,
                        batch: int = 512) -> np.ndarray:
    preds = []
    for i in range(0, len(inputs), batch):
        cats, _ = bundle.pseudo_label_batch(
            torch.from_numpy(inputs[i:i + batch]))
        preds.append(cats.numpy())
    return np.concatenate(preds)


def evaluate_accuracy(bundle: ModelBundle, data: Dataset) -> float:
    """Mean prediction accuracy on clean inputs against retained labels."""
    if len(data) == 0 or data.labels is None:
        return float("nan")
    preds = _predict_categories(bundle, data.inputs)
    return float((preds == data.labels).mean())


def _check_datasets(config: TrainConfig, data: SplitData):
    labeled, unlabeled, test = data
    if len(labeled) == 0:
        raise ValueError("labeled split is empty")
    if labeled.visible_labels is None:
        raise ValueError("labeled split does not expose labels")
    shapes = {labeled.input_shape, test.input_shape}
    if len(unlabeled):
        shapes.add(unlabeled.input_shape)
    if len(shapes) != 1:
        raise ValueError(f"splits disagree on input shape: {shapes}")
    cats = {labeled.num_categories, unlabeled.num_categories,
            test.num_categories}
    if len(cats) != 1:
        raise ValueError(f"splits disagree on num_categories: {cats}")


def run(config: TrainConfig, data: SplitData,
        pretrained: Optional[str] = None):
    """Full training run. Returns (TrainReport, bundle, stores)."""
    _check_datasets(config, data)
    labeled, unlabeled, test = data
    num_categories = labeled.num_categories

    seed_ints = np.random.SeedSequence(config.seed).generate_state(6)
    bundle = make_bundle(
        labeled.input_shape, num_categories,
        feature_dim=config.feature_dim, projector_dim=config.projector_dim,
        hidden_dims=config.hidden_dims, momentum=config.momentum_encoder,
        freeze_encoder=config.freeze_encoder, seed=config.seed,
        conv_width=config.conv_width, normalize=config.normalize_keys)
    if pretrained is not None:
        load_encoder(bundle, pretrained)
    optimizer = make_optimizer(bundle, config)
    stores = make_stores(config, num_categories, int(seed_ints[0]),
                         int(seed_ints[1]))
    augs = (AugmentationPolicy(config.augment_kind,
                               config.aug_strength_query,
                               seed=int(seed_ints[2])),
            AugmentationPolicy(config.augment_kind,
                               config.aug_strength_key,
                               seed=int(seed_ints[3])))
    rng_l = np.random.default_rng(int(seed_ints[4]))
    rng_u = np.random.default_rng(int(seed_ints[5]))

    unlabeled_pass = _uses_unlabeled(config) and len(unlabeled) > 0
    labels_l = labeled.visible_labels
    rows = []
    if unlabeled_pass:
        cycler = _Cycler(len(labeled), rng_l)
        steps = math.ceil(len(unlabeled) / config.unlabeled_batch_size)
    else:
        steps = math.ceil(len(labeled) / config.labeled_batch_size)

    for epoch in range(1, config.epochs + 1):
        acc = np.zeros(4)
        if unlabeled_pass:
            u_order = rng_u.permutation(len(unlabeled))
        else:
            l_order = rng_l.permutation(len(labeled))
        for step in range(steps):
            if unlabeled_pass:
                bu = config.unlabeled_batch_size
                u_idx = u_order[step * bu:(step + 1) * bu]
                l_idx = cycler.take(config.labeled_batch_size)
                u_batch = unlabeled.inputs[u_idx]
            else:
                bl = config.labeled_batch_size
                l_idx = l_order[step * bl:(step + 1) * bl]
                u_batch = None
            report = train_step(
                bundle, stores, (labeled.inputs[l_idx], labels_l[l_idx]),
                u_batch, config, optimizer=optimizer, augs=augs)
            acc += (report.ce, report.pgc_labeled, report.pgc_unlabeled,
                    report.pseudo_coverage)
        acc /= steps
        rows.append(EpochRow(
            epoch, float(acc[0]), float(acc[1]), float(acc[2]),
            evaluate_accuracy(bundle, test),
            evaluate_accuracy(bundle, unlabeled), float(acc[3])))

    report = TrainReport(rows)
    report.summary = _summarize(config, report)
    return report, bundle, stores


def train(config: TrainConfig, data: SplitData,
          pretrained: Optional[str] = None) -> TrainReport:
    """Run a full training and return its epoch report."""
    return run(config, data, pretrained=pretrained)[0]


def _clean(value: float):
    return None if math.isnan(value) else float(value)


def _summarize(config: TrainConfig, report: TrainReport) -> dict:
    gaps = [g for g in report.tolerance_gaps() if not math.isnan(g)]
    last = report.rows[-1]
    return {
        "method": config.method,
        "seed": config.seed,
        "epochs": config.epochs,
        "final_test_accuracy": _clean(last.test_accuracy),
        "best_test_accuracy": _clean(max(r.test_accuracy
                                         for r in report.rows)),
        "final_pseudo_label_accuracy": _clean(last.pseudo_label_accuracy),
        "final_pseudo_coverage": _clean(last.pseudo_coverage),
        "mean_tolerance_gap": (float(np.mean(gaps)) if gaps else None),
    }


def load_encoder(bundle: ModelBundle, path):
    """Copy a saved checkpoint's encoder weights into ``bundle`` (the slow
    copy too, when present), leaving heads at their fresh init.

    Only ``encoder.*`` records are read, so the donor run may have had a
    different category count or projector size.
    """
    records = read_checkpoint_records(path)
    state = {}
    for name, tensor in bundle.encoder.state_dict().items():
        full = f"encoder.{name}"
        if full not in records:
            raise ValueError(f"{path}: missing encoder tensor {full}")
        arr = records[full]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ValueError(
                f"{path}: encoder shape mismatch for {full}: file has "
                f"{tuple(arr.shape)}, model wants {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(arr).to(tensor.dtype)
    bundle.encoder.load_state_dict(state)
    if bundle.momentum is not None:
        bundle.key_encoder.load_state_dict(bundle.encoder.state_dict())
    return bundle


ABLATION_VARIANTS = (
    ("ce_loss", {"method": "pseudo_label_ce"}),
    ("cl_loss", {"method": "contrastive_cl"}),
    ("pgc_loss", {"method": "self_tuning"}),
    ("no_pgc_unlabeled", {"method": "self_tuning",
                          "disable_pgc_unlabeled": True}),
    ("no_pgc_labeled", {"method": "self_tuning",
                        "disable_pgc_labeled": True}),
    ("separate_queue", {"method": "self_tuning", "separate_queues": True}),
    ("unified", {"method": "self_tuning"}),
)


@dataclass
class AblationRow:
    name: str
    accuracies: list
    mean: float
    std: float


@dataclass
class AblationResult:
    rows: list
    seeds: list

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant"] +
                        [f"seed_{s}" for s in self.seeds] + ["mean", "std"])
        for r in self.rows:
            writer.writerow([r.name] + [repr(a) for a in r.accuracies] +
                            [repr(r.mean), repr(r.std)])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_string())


def _base_self_tuning(config: TrainConfig) -> TrainConfig:
    return dataclasses.replace(
        config, method="self_tuning", disable_pgc_labeled=False,
        disable_pgc_unlabeled=False, separate_queues=False)


def run_ablation_suite(base_config: TrainConfig, data: SplitData,
                       seeds: Sequence[int] = (0, 1, 2),
                       pretrained: Optional[str] = None) -> AblationResult:
    """Final test accuracy of the seven objective variants over shared seeds.

    The ``unified`` row is the untouched base configuration; every other
    row changes exactly one thing relative to it.
    """
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    base = _base_self_tuning(base_config)
    rows = []
    for name, patch in ABLATION_VARIANTS:
        accs = []
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, **patch)
            accs.append(train(cfg, data,
                              pretrained=pretrained).final_test_accuracy())
        rows.append(AblationRow(name, accs, float(np.mean(accs)),
                                float(np.std(accs))))
    return AblationResult(rows, list(seeds))


@dataclass
class SweepResult:
    projector_dims: list
    queue_sizes: list
    matrix: np.ndarray    # (len(projector_dims), len(queue_sizes))

    def spread(self) -> float:
        return float(self.matrix.max() - self.matrix.min())

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["projector_dim"] +
                        [f"keys_{d}" for d in self.queue_sizes])
        for dim, row in zip(self.projector_dims, self.matrix):
            writer.writerow([dim] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_string())


def run_sensitivity_sweep(base_config: TrainConfig,
                          projector_dims: Sequence[int],
                          queue_sizes: Sequence[int], data: SplitData,
                          pretrained: Optional[str] = None) -> SweepResult:
    """Final test accuracy over the (projector_dim, keys_per_category) grid."""
    if len(projector_dims) == 0 or len(queue_sizes) == 0:
        raise ValueError("sweep grid must be nonempty on both axes")
    matrix = np.zeros((len(projector_dims), len(queue_sizes)))
    for i, dim in enumerate(projector_dims):
        for j, size in enumerate(queue_sizes):
            cfg = dataclasses.replace(base_config, projector_dim=int(dim),
                                      keys_per_category=int(size))
            matrix[i, j] = train(cfg, data,
                                 pretrained=pretrained).final_test_accuracy()
    return SweepResult(list(projector_dims), list(queue_sizes), matrix)
