"""Differentiable training losses.

All losses here are pure functions of torch tensors and work in whatever
float dtype they are handed (the gradient tests run them in float64).
Exponentials over temperature-scaled dot products are always evaluated
through ``logsumexp`` (max subtraction), since unit vectors at temperature
0.07 already produce logits around +-14 and anything unnormalized would
overflow a naive softmax in float32.

Four families are implemented:

* ``cross_entropy`` / ``pseudo_ce``: negative log-likelihood on a
  probability vector, the latter gated by a confidence threshold and fed by
  the model's own argmax prediction.
* ``info_nce``: single-positive instance contrast against a set of
  negatives.
* ``pgc`` / ``pgc_labeled``: group contrast, where the query is attracted
  to a whole group of keys sharing its (pseudo-)label and repelled from
  keys of every other label. The denominator is one softmax over all
  ``group + negatives`` logits, shared by every positive term.
* ``total_objective``: the unit-weight sum of the enabled terms. There are
  no trade-off coefficients between the terms.

Argmax ties break toward the lowest category index everywhere, so that runs
are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch

PROB_EPS = 1e-12


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def argmax_lowest(values, dim=-1):
    """Argmax with ties broken to the lowest index along ``dim``."""
    values = _as_tensor(values)
    top = values.max(dim=dim, keepdim=True).values
    idx = torch.arange(values.shape[dim], device=values.device)
    shape = [1] * values.ndim
    shape[dim] = -1
    idx = idx.view(shape).expand_as(values)
    candidates = torch.where(values == top, idx, values.shape[dim])
    return candidates.min(dim=dim).values


@dataclass
class ContrastInstance:
    """One group-contrast evaluation: a query against grouped keys.

    ``positive_group`` holds the fresh key of the query's own example plus
    the queue keys of its (pseudo-)category, ``(D + 1, L)``. ``negative_set``
    holds every key of every other category, ``(D * (C - 1), L)``. The
    fresh key may coincidentally duplicate a queue key; duplicates are
    permitted.
    """

    query: torch.Tensor
    positive_group: torch.Tensor
    negative_set: torch.Tensor
    temperature: float = 0.07

    def __post_init__(self):
        self.query = _as_tensor(self.query)
        self.positive_group = _as_tensor(self.positive_group)
        self.negative_set = _as_tensor(self.negative_set)
        if self.query.ndim != 1:
            raise ValueError("query must be a 1-D vector")
        dim = self.query.shape[0]
        if self.positive_group.ndim != 2 or self.positive_group.shape[1] != dim:
            raise ValueError(
                f"positive_group must be (n, {dim}), got "
                f"{tuple(self.positive_group.shape)}")
        if self.positive_group.shape[0] < 1:
            raise ValueError("positive_group must hold at least one key")
        if self.negative_set.ndim != 2 or self.negative_set.shape[1] != dim:
            raise ValueError(
                f"negative_set must be (n, {dim}), got "
                f"{tuple(self.negative_set.shape)}")
        if self.negative_set.shape[0] < 1:
            raise ValueError(
                "negative_set is empty; contrast is degenerate with a single "
                "category")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossReport:
    """Per-batch loss values of one training step.

    ``total`` is the objective the optimizer actually stepped on. When all
    three unified-objective terms are enabled it equals
    ``ce + pgc_labeled + pgc_unlabeled``; for baseline methods it instead
    includes ``unlabeled_baseline`` (the threshold pseudo-label CE or the
    instance-contrast term), which has no column of its own in the epoch
    CSV. ``pseudo_coverage`` is the fraction of the unlabeled batch that
    contributed to the unlabeled term (threshold pass rate for the
    pseudo-label CE baseline; 1.0 for the threshold-free group contrast).
    """

    ce: float = 0.0
    pgc_labeled: float = 0.0
    pgc_unlabeled: float = 0.0
    total: float = 0.0
    pseudo_coverage: float = 0.0
    unlabeled_baseline: float = field(default=0.0, compare=False)


class PseudoCEOutcome(NamedTuple):
    loss: torch.Tensor
    passed: bool
    category: int


def cross_entropy(prob, label):
    """Negative log of the probability assigned to ``label``.

    The picked probability is clamped at ``1e-12`` before the log so the
    loss stays finite on degenerate predictions.
    """
    prob = _as_tensor(prob)
    if prob.ndim != 1:
        raise ValueError("prob must be a 1-D probability vector")
    if not 0 <= label < prob.shape[0]:
        raise ValueError(f"label {label} out of range [0, {prob.shape[0]})")
    return -torch.log(prob[label].clamp(min=PROB_EPS))


def pseudo_ce(prob, threshold):
    """Self-training loss: ``-log(max prob)`` gated by a confidence threshold.

    The predicted category is the argmax (ties to the lowest index) and its
    probability is the confidence. Only confidences strictly above
    ``threshold`` contribute; everything else yields an exact zero. The
    returned ``passed`` flag feeds the coverage metric.
    """
    prob = _as_tensor(prob)
    if prob.ndim != 1:
        raise ValueError("prob must be a 1-D probability vector")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    category = int(argmax_lowest(prob))
    confidence = prob[category]
    if confidence.item() > threshold:
        return PseudoCEOutcome(-torch.log(confidence.clamp(min=PROB_EPS)),
                               True, category)
    return PseudoCEOutcome(prob.new_zeros(()), False, category)


def _group_contrast(query, positive_group, negative_set, temperature):
    """Shared core of ``info_nce`` and ``pgc``.

    loss = logsumexp(all logits) - mean(positive logits), with logits
    ``key . query / temperature`` and the positives listed first. The
    single logsumexp is the one denominator shared by every positive term.
    """
    logits_pos = positive_group @ query / temperature
    logits_neg = negative_set @ query / temperature
    denom = torch.logsumexp(torch.cat([logits_pos, logits_neg]), dim=0)
    return denom - logits_pos.mean()


def info_nce(query, positive, negatives, temperature=0.07):
    """Instance contrast: one positive key against a set of negatives."""
    query = _as_tensor(query)
    positive = _as_tensor(positive)
    negatives = _as_tensor(negatives)
    if query.ndim != 1 or positive.shape != query.shape:
        raise ValueError("query and positive must be 1-D vectors of equal size")
    if negatives.ndim != 2 or negatives.shape[1] != query.shape[0]:
        raise ValueError(
            f"negatives must be (n, {query.shape[0]}), got "
            f"{tuple(negatives.shape)}")
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative key")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return _group_contrast(query, positive.unsqueeze(0), negatives, temperature)


def pgc(instance: ContrastInstance):
    """Group contrast: average InfoNCE-style term over the positive group.

    Every key in the positive group competes inside one shared softmax, so
    when some group members carry a wrong pseudo-label, the keys that truly
    match the query keep most of the positive mass and dominate the
    gradient.
    """
    return _group_contrast(instance.query, instance.positive_group,
                           instance.negative_set, instance.temperature)


def pgc_labeled(instance: ContrastInstance):
    """Group contrast on the labeled stream.

    Same formula as :func:`pgc`; the only difference is upstream, where the
    ground-truth label (not the pseudo-label) selected the positive group.
    """
    return pgc(instance)


def total_objective(ce, pgc_l, pgc_u, include_pgc_labeled=True,
                    include_pgc_unlabeled=True):
    """Unit-weight sum of the enabled loss terms (no trade-off coefficients)."""
    total = ce
    if include_pgc_labeled:
        total = total + pgc_l
    if include_pgc_unlabeled:
        total = total + pgc_u
    return total


# ---------------------------------------------------------------------------
# Batched forms used by the training loop. Each must agree with its
# per-example counterpart above; the equivalence is covered by tests.
# ---------------------------------------------------------------------------

def cross_entropy_batch(probs, labels):
    """Row-wise ``cross_entropy``; probs ``(B, C)``, labels ``(B,)``."""
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp(min=PROB_EPS))


def predict_batch(probs):
    """Row-wise (category, confidence) with ties to the lowest index."""
    categories = argmax_lowest(probs, dim=1)
    confidences = probs.gather(1, categories.view(-1, 1)).squeeze(1)
    return categories, confidences


def pseudo_ce_batch(probs, threshold):
    """Row-wise ``pseudo_ce``; returns (losses, passed mask, categories)."""
    categories, confidences = predict_batch(probs)
    passed = confidences > threshold
    losses = torch.where(passed, -torch.log(confidences.clamp(min=PROB_EPS)),
                         torch.zeros_like(confidences))
    return losses, passed, categories


def group_contrast_batch(queries, own_keys, categories, all_keys, temperature):
    """Row-wise ``pgc`` against a full key store snapshot.

    ``queries`` and ``own_keys`` are ``(B, L)``, ``categories`` ``(B,)``,
    ``all_keys`` the ``(C, D, L)`` store snapshot. For each row the positive
    group is its own fresh key plus the ``D`` snapshot keys of its category;
    every other snapshot key is a negative. One logsumexp over all
    ``C*D + 1`` logits forms the shared denominator.
    """
    num_categories, keys_per_cat, _ = all_keys.shape
    flat = all_keys.reshape(num_categories * keys_per_cat, -1)
    queue_logits = queries @ flat.T / temperature          # (B, C*D)
    own_logits = (queries * own_keys).sum(dim=1) / temperature  # (B,)
    denom = torch.logsumexp(
        torch.cat([own_logits.unsqueeze(1), queue_logits], dim=1), dim=1)
    onehot = torch.nn.functional.one_hot(categories, num_categories)
    mask = onehot.to(queue_logits.dtype).repeat_interleave(keys_per_cat, dim=1)
    pos_sum = own_logits + (queue_logits * mask).sum(dim=1)
    return denom - pos_sum / (keys_per_cat + 1)


def info_nce_batch(queries, own_keys, all_keys, temperature):
    """Row-wise ``info_nce`` with every snapshot key as a negative.

    This is the instance-contrast baseline: the store partition is ignored,
    so same-category keys end up on the negative side.
    """
    flat = all_keys.reshape(-1, all_keys.shape[-1])
    queue_logits = queries @ flat.T / temperature
    own_logits = (queries * own_keys).sum(dim=1) / temperature
    denom = torch.logsumexp(
        torch.cat([own_logits.unsqueeze(1), queue_logits], dim=1), dim=1)
    return denom - own_logits
