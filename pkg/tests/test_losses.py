import math

import numpy as np
import pytest
import torch

from grouptune import losses as L

from oracles import (ce_ref, info_nce_ref, pgc_ref, positive_group_masses,
                     pseudo_ce_ref, unit_vectors)

T64 = dict(dtype=torch.float64)


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def random_instance(rng, dim, group, negs, tau=0.07):
    q = unit_vectors(rng, 1, dim)[0]
    pos = unit_vectors(rng, group, dim)
    neg = unit_vectors(rng, negs, dim)
    return q, pos, neg, L.ContrastInstance(t(q), t(pos), t(neg), tau)


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        p = torch.zeros(5, **T64)
        p[3] = 1.0
        assert float(L.cross_entropy(p, 3)) == 0.0

    def test_uniform_is_log_c(self):
        p = torch.full((4,), 0.25, **T64)
        assert abs(float(L.cross_entropy(p, 2)) - math.log(4)) < 1e-12

    def test_hand_value(self):
        p = t([0.7, 0.2, 0.1])
        assert abs(float(L.cross_entropy(p, 0)) - 0.35667494393873245) < 1e-12

    def test_label_out_of_range(self):
        p = t([0.5, 0.5])
        with pytest.raises(ValueError):
            L.cross_entropy(p, 2)
        with pytest.raises(ValueError):
            L.cross_entropy(p, -1)

    def test_clamp_keeps_loss_finite(self):
        p = t([1.0, 0.0])
        v = float(L.cross_entropy(p, 1))
        assert math.isfinite(v)
        assert abs(v - (-math.log(1e-12))) < 1e-6

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = int(rng.integers(2, 7))
            p = rng.dirichlet(np.ones(c))
            lab = int(rng.integers(c))
            assert abs(float(L.cross_entropy(t(p), lab))
                       - ce_ref(p, lab)) < 1e-12


class TestPseudoCE:
    def test_gate_closed(self):
        out = L.pseudo_ce(t([0.90, 0.10]), 0.95)
        assert float(out.loss) == 0.0
        assert out.passed is False
        assert out.category == 0

    def test_gate_open(self):
        out = L.pseudo_ce(t([0.96, 0.04]), 0.95)
        assert abs(float(out.loss) - (-math.log(0.96))) < 1e-12
        assert out.passed is True

    def test_equality_does_not_pass(self):
        out = L.pseudo_ce(t([0.95, 0.05]), 0.95)
        assert out.passed is False
        assert float(out.loss) == 0.0

    def test_uniform_tie_breaks_low(self):
        out = L.pseudo_ce(t([0.25, 0.25, 0.25, 0.25]), 0.0)
        assert out.category == 0
        assert abs(float(out.loss) - math.log(4)) < 1e-12

    def test_threshold_range_checked(self):
        with pytest.raises(ValueError):
            L.pseudo_ce(t([0.5, 0.5]), 1.5)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            c = int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(c) * 0.7)
            thr = float(rng.random())
            loss, passed, cat = pseudo_ce_ref(p, thr)
            out = L.pseudo_ce(t(p), thr)
            assert abs(float(out.loss) - loss) < 1e-12
            assert out.passed == passed
            assert out.category == cat


class TestInfoNCE:
    def test_symmetric_value(self):
        q = t([1.0, 0, 0])
        negs = torch.stack([q] * 4)
        assert abs(float(L.info_nce(q, q, negs)) - math.log(5)) < 1e-12

    def test_saturation(self):
        # positive logit beats every negative by >= 40 tau
        dim = 4
        q = torch.zeros(dim, **T64)
        q[0] = 1.0
        pos = q.clone()
        neg = torch.zeros(3, dim, **T64)
        neg[:, 1] = 1.0  # orthogonal: dot 0 vs 1, gap 1/tau >= 40/tau*tau
        tau = 0.02  # gap/tau = 50 >= 40
        assert float(L.info_nce(q, pos, neg, tau)) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            q = unit_vectors(rng, 1, 8)[0]
            pos = unit_vectors(rng, 1, 8)[0]
            negs = unit_vectors(rng, 6, 8)
            got = float(L.info_nce(t(q), t(pos), t(negs), 0.07))
            assert abs(got - info_nce_ref(q, pos, negs, 0.07)) < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            L.info_nce(t([1.0, 0]), t([1.0, 0, 0]), t([[1.0, 0]]))
        with pytest.raises(ValueError):
            L.info_nce(t([1.0, 0]), t([1.0, 0]), t([[1.0, 0, 0]]))

    def test_needs_a_negative(self):
        with pytest.raises(ValueError):
            L.info_nce(t([1.0, 0]), t([1.0, 0]), torch.zeros(0, 2, **T64))


class TestContrastInstance:
    def test_validation(self):
        q = t([1.0, 0])
        pos = t([[1.0, 0]])
        neg = t([[0.0, 1]])
        L.ContrastInstance(q, pos, neg, 0.07)  # fine
        with pytest.raises(ValueError):
            L.ContrastInstance(q, pos, neg, 0.0)
        with pytest.raises(ValueError):
            L.ContrastInstance(q, torch.zeros(0, 2, **T64), neg, 0.07)
        with pytest.raises(ValueError):
            L.ContrastInstance(q, pos, torch.zeros(0, 2, **T64), 0.07)
        with pytest.raises(ValueError):
            L.ContrastInstance(q, t([[1.0, 0, 0]]), neg, 0.07)


class TestPGC:
    def test_symmetric_value_d2_c3(self):
        q = t([0, 1.0, 0, 0])
        pos = torch.stack([q] * 3)       # own key + D=2 queue keys
        neg = torch.stack([q] * 4)       # D * (C-1) = 4
        inst = L.ContrastInstance(q, pos, neg, 0.07)
        assert abs(float(L.pgc(inst)) - math.log(7)) < 1e-12

    def test_symmetric_value_invariant_to_tau(self):
        q = t([0, 1.0, 0])
        pos = torch.stack([q] * 3)
        neg = torch.stack([q] * 4)
        vals = [float(L.pgc(L.ContrastInstance(q, pos, neg, tau)))
                for tau in (0.05, 0.07, 0.5, 1.0)]
        for v in vals:
            assert abs(v - vals[0]) < 1e-12

    def test_group_of_one_equals_info_nce_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            q, pos, neg, inst = random_instance(rng, 6, 1, 8)
            a = float(L.pgc(inst))
            b = float(L.info_nce(t(q), t(pos[0]), t(neg), 0.07))
            assert a == b

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            q, pos, neg, inst = random_instance(rng, 8, 4, 9)
            assert abs(float(L.pgc(inst)) - pgc_ref(q, pos, neg, 0.07)) < 1e-9

    def test_pgc_labeled_is_same_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            _, _, _, inst = random_instance(rng, 5, 3, 6)
            assert float(L.pgc_labeled(inst)) == float(L.pgc(inst))

    def test_softmax_mass_sums_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            q, pos, neg, _ = random_instance(rng, 8, 3, 8)
            logits = np.concatenate([pos @ q, neg @ q]) / 0.07
            mass = np.exp(logits - logits.max())
            mass /= mass.sum()
            assert abs(mass.sum() - 1.0) < 1e-9

    def test_false_label_tolerance_margin(self):
        # keys close to q dominate the positive-group mass whenever the
        # margin over the corrupted keys exceeds tau * ln(D + 1)
        rng = np.random.default_rng(7)
        tau = 0.07
        for _ in range(200):
            dim = int(rng.integers(4, 9))
            group = int(rng.integers(2, 6))          # D + 1
            n_true = int(rng.integers(1, group))
            m2 = float(rng.uniform(-0.5, 0.5))
            m1 = m2 + tau * math.log(group) + float(rng.uniform(0.01, 0.3))
            m1 = min(m1, 1.0)
            q = unit_vectors(rng, 1, dim)[0]
            pos = np.array([_key_with_dot(rng, q, m1 if i < n_true else
                                          m2 - rng.uniform(0, 0.2))
                            for i in range(group)])
            neg = unit_vectors(rng, 6, dim)
            masses = positive_group_masses(q, pos, neg, tau)
            assert masses[:n_true].sum() > masses[n_true:].sum()


def _key_with_dot(rng, q, target):
    """Unit vector whose dot product with unit q is exactly target."""
    dim = len(q)
    r = rng.standard_normal(dim)
    r -= r.dot(q) * q
    r /= np.linalg.norm(r)
    return target * q + math.sqrt(max(0.0, 1.0 - target * target)) * r


class TestTotalObjective:
    def test_all_on(self):
        assert float(L.total_objective(t(0.5), t(1.0), t(2.0))) == 3.5

    def test_unlabeled_off(self):
        v = L.total_objective(t(0.5), t(1.0), t(2.0),
                              include_pgc_unlabeled=False)
        assert float(v) == 1.5

    def test_both_off_is_plain_ce(self):
        v = L.total_objective(t(0.5), t(1.0), t(2.0),
                              include_pgc_labeled=False,
                              include_pgc_unlabeled=False)
        assert float(v) == 0.5


class TestArgmaxLowest:
    def test_first_max_wins(self):
        assert int(L.argmax_lowest(t([0.2, 0.5, 0.5, 0.1]))) == 1
        assert int(L.argmax_lowest(t([0.5, 0.5]))) == 0

    def test_batched(self):
        vals = t([[1.0, 1.0, 0.5], [0.1, 0.2, 0.2]])
        assert L.argmax_lowest(vals, dim=1).tolist() == [0, 1]

    def test_matches_numpy_on_random(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            v = rng.integers(0, 4, size=7).astype(np.float64)  # forced ties
            assert int(L.argmax_lowest(t(v))) == int(np.argmax(v))


class TestBatchedForms:
    def test_cross_entropy_batch_matches_single(self):
        rng = np.random.default_rng(9)
        probs = rng.dirichlet(np.ones(5), size=12)
        labels = rng.integers(0, 5, size=12)
        batch = L.cross_entropy_batch(t(probs), torch.as_tensor(labels))
        for i in range(12):
            single = L.cross_entropy(t(probs[i]), int(labels[i]))
            assert abs(float(batch[i]) - float(single)) < 1e-12

    def test_pseudo_ce_batch_matches_single(self):
        rng = np.random.default_rng(10)
        probs = rng.dirichlet(np.ones(4) * 0.5, size=20)
        for thr in (0.0, 0.5, 0.95):
            losses, passed, cats = L.pseudo_ce_batch(t(probs), thr)
            for i in range(20):
                out = L.pseudo_ce(t(probs[i]), thr)
                assert abs(float(losses[i]) - float(out.loss)) < 1e-12
                assert bool(passed[i]) == out.passed
                assert int(cats[i]) == out.category

    def test_group_contrast_batch_matches_single(self):
        rng = np.random.default_rng(11)
        C, D, dim, B = 4, 3, 6, 10
        all_keys = unit_vectors(rng, C * D, dim).reshape(C, D, dim)
        queries = unit_vectors(rng, B, dim)
        own = unit_vectors(rng, B, dim)
        cats = rng.integers(0, C, size=B)
        batch = L.group_contrast_batch(t(queries), t(own),
                                       torch.as_tensor(cats), t(all_keys),
                                       0.07)
        for i in range(B):
            c = int(cats[i])
            pos = np.concatenate([own[i][None], all_keys[c]])
            neg = all_keys[[j for j in range(C) if j != c]].reshape(-1, dim)
            want = pgc_ref(queries[i], pos, neg, 0.07)
            assert abs(float(batch[i]) - want) < 1e-9

    def test_info_nce_batch_matches_single(self):
        rng = np.random.default_rng(12)
        C, D, dim, B = 3, 4, 5, 8
        all_keys = unit_vectors(rng, C * D, dim).reshape(C, D, dim)
        queries = unit_vectors(rng, B, dim)
        own = unit_vectors(rng, B, dim)
        batch = L.info_nce_batch(t(queries), t(own), t(all_keys), 0.07)
        flat = all_keys.reshape(-1, dim)
        for i in range(B):
            want = info_nce_ref(queries[i], own[i], flat, 0.07)
            assert abs(float(batch[i]) - want) < 1e-9
