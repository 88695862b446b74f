import math

import numpy as np
import pytest
import torch

from grouptune import losses as L
from grouptune.model import (ModelBundle, Projector, load_checkpoint,
                             make_bundle, read_checkpoint_records,
                             save_checkpoint)


def tiny_bundle(momentum=None, seed=0, normalize=True, projector_dim=8):
    return make_bundle((6,), 3, feature_dim=12, projector_dim=projector_dim,
                       hidden_dims=(10,), momentum=momentum, seed=seed,
                       normalize=normalize)


def all_state(bundle):
    out = {}
    for name, mod in bundle.modules_by_name().items():
        for k, v in mod.state_dict().items():
            out[f"{name}.{k}"] = v.clone()
    return out


class TestConstruction:
    def test_seeded_determinism(self):
        a, b = tiny_bundle(seed=4), tiny_bundle(seed=4)
        for (ka, va), (kb, vb) in zip(all_state(a).items(),
                                      all_state(b).items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_momentum_range_validated(self):
        tiny_bundle(momentum=0.0)
        tiny_bundle(momentum=0.999)
        with pytest.raises(ValueError):
            tiny_bundle(momentum=1.0)
        with pytest.raises(ValueError):
            tiny_bundle(momentum=-0.1)

    @pytest.mark.parametrize("proj", [16, 64])
    def test_output_dims(self, proj):
        bundle = tiny_bundle(projector_dim=proj)
        q = bundle.encode_query(torch.randn(3, 6))
        assert q.shape == (3, proj)

    def test_classifier_width(self):
        bundle = make_bundle((6,), 5, feature_dim=12, seed=0)
        probs = bundle.predict_probs(torch.randn(2, 6))
        assert probs.shape == (2, 5)
        assert torch.allclose(probs.sum(dim=1), torch.ones(2), atol=1e-6)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            make_bundle((3, 4), 3)
        with pytest.raises(ValueError):
            make_bundle((6,), 1)

    def test_conv_encoder_for_images(self):
        bundle = make_bundle((1, 8, 8), 4, feature_dim=12, projector_dim=8,
                             seed=0)
        q = bundle.encode_query(torch.randn(2, 1, 8, 8))
        assert q.shape == (2, 8)


class TestEncoding:
    def test_query_unit_norm(self):
        bundle = tiny_bundle()
        q = bundle.encode_query(torch.randn(16, 6))
        np.testing.assert_allclose(q.norm(dim=1).detach().numpy(), 1.0,
                                   atol=1e-6)

    def test_unnormalized_mode(self):
        bundle = tiny_bundle(normalize=False)
        q = bundle.encode_query(torch.randn(16, 6))
        assert (q.norm(dim=1) - 1.0).abs().max() > 1e-3

    def test_key_equals_query_without_momentum(self):
        bundle = tiny_bundle(momentum=None)
        x = torch.randn(4, 6)
        q = bundle.encode_query(x).detach()
        k = bundle.encode_key(x)
        assert torch.equal(q, k)

    def test_key_uses_slow_branch_with_momentum(self):
        bundle = tiny_bundle(momentum=0.5)
        x = torch.randn(4, 6)
        assert torch.equal(bundle.encode_query(x).detach(),
                           bundle.encode_key(x))  # copies start equal
        # drift the fast branch; keys must keep following the old weights
        with torch.no_grad():
            for p in bundle.encoder.parameters():
                p.add_(0.3)
        assert not torch.equal(bundle.encode_query(x).detach(),
                               bundle.encode_key(x))

    def test_keys_carry_no_gradient(self):
        bundle = tiny_bundle(momentum=None)
        k = bundle.encode_key(torch.randn(3, 6))
        assert not k.requires_grad
        with pytest.raises(RuntimeError):
            k.sum().backward()

    def test_loss_gradient_flows_only_through_query(self):
        # central differences on one fast weight: with the query input held
        # fixed, a loss built purely from keys must not react
        bundle = tiny_bundle(momentum=None)
        x = torch.randn(5, 6)
        weight = bundle.encoder.net[0].weight

        def key_loss():
            return float(bundle.encode_key(x).sum())

        h = 1e-4
        with torch.no_grad():
            base = key_loss()
            weight[0, 0] += h
            hi = key_loss()
            weight[0, 0] -= h
        assert hi != base  # the weight does affect key values...
        q = bundle.encode_query(x)
        loss = (q * bundle.encode_key(x)).sum()
        loss.backward()
        # ...but autograd sees only the query path, matching a finite
        # difference taken with keys frozen
        frozen_keys = bundle.encode_key(x)

        def query_loss():
            with torch.enable_grad():
                val = (bundle.encode_query(x) * frozen_keys).sum()
            return float(val.detach())

        with torch.no_grad():
            weight[0, 0] += h
            up = query_loss()
            weight[0, 0] -= 2 * h
            down = query_loss()
            weight[0, 0] += h
        fd = (up - down) / (2 * h)
        assert abs(float(weight.grad[0, 0]) - fd) < 1e-2 * max(1.0, abs(fd))


class TestMomentumUpdate:
    def test_exact_formula(self):
        bundle = tiny_bundle(momentum=0.25)
        slow_before = [p.clone() for p in bundle._key_parameters()]
        with torch.no_grad():
            for p in bundle._fast_key_parameters():
                p.copy_(torch.randn_like(p))
        fast = [p.clone() for p in bundle._fast_key_parameters()]
        bundle.momentum_update()
        for s0, f, s1 in zip(slow_before, fast, bundle._key_parameters()):
            assert torch.equal(s1, 0.25 * s0 + 0.75 * f)

    def test_noop_without_momentum(self):
        bundle = tiny_bundle(momentum=None)
        state = all_state(bundle)
        bundle.momentum_update()
        for k, v in all_state(bundle).items():
            assert torch.equal(v, state[k])


class TestPseudoLabel:
    def _fixed_logit_bundle(self, logits):
        bundle = tiny_bundle()
        with torch.no_grad():
            bundle.classifier.weight.zero_()
            bundle.classifier.bias.copy_(torch.as_tensor(logits))
        return bundle

    def test_hand_softmax_value(self):
        bundle = self._fixed_logit_bundle([2.0, 1.0, 0.5])
        out = bundle.pseudo_label(torch.randn(6))
        want = math.exp(2) / (math.exp(2) + math.exp(1) + math.exp(0.5))
        assert out.category == 0
        assert abs(out.confidence - want) < 1e-6
        assert abs(want - 0.6285) < 5e-4

    def test_tie_breaks_to_lowest(self):
        bundle = self._fixed_logit_bundle([0.7, 0.7, 0.7])
        out = bundle.pseudo_label(torch.randn(6))
        assert out.category == 0
        assert abs(out.confidence - 1 / 3) < 1e-6

    def test_saturated_confidence(self):
        bundle = self._fixed_logit_bundle([40.0, 0.0, 0.0])
        out = bundle.pseudo_label(torch.randn(6))
        assert out.confidence > 1 - 1e-12

    def test_batch_matches_single(self):
        bundle = tiny_bundle(seed=2)
        x = torch.randn(9, 6)
        cats, confs = bundle.pseudo_label_batch(x)
        for i in range(9):
            single = bundle.pseudo_label(x[i])
            assert int(cats[i]) == single.category
            assert abs(float(confs[i]) - single.confidence) < 1e-7

    def test_correct_classifier_recovers_label(self):
        # one-hot-correct classifier: pseudo-label equals ground truth
        bundle = make_bundle((3,), 3, feature_dim=3, projector_dim=4,
                             hidden_dims=(), seed=0)
        with torch.no_grad():
            bundle.encoder.net[0].weight.copy_(torch.eye(3))
            bundle.encoder.net[0].bias.zero_()
            bundle.classifier.weight.copy_(40 * torch.eye(3))
            bundle.classifier.bias.zero_()
        for label in range(3):
            x = torch.zeros(3)
            x[label] = 1.0
            assert bundle.pseudo_label(x).category == label


class TestParameterGroups:
    def test_partition_counts(self):
        bundle = tiny_bundle()
        backbone, fresh = bundle.parameter_groups()
        trainable = [p for m in (bundle.encoder, bundle.projector,
                                 bundle.classifier)
                     for p in m.parameters() if p.requires_grad]
        assert len(backbone) + len(fresh) == len(trainable)

    def test_frozen_encoder_empty_backbone(self):
        bundle = make_bundle((6,), 3, feature_dim=12, seed=0,
                             freeze_encoder=True)
        backbone, fresh = bundle.parameter_groups()
        assert backbone == []
        assert len(fresh) > 0
        assert all(not p.requires_grad for p in bundle.encoder.parameters())

    def test_lr_multiplier_groups(self):
        bundle = tiny_bundle()
        groups = bundle.optimizer_groups(0.001, 10.0)
        assert groups[0]["lr"] == 0.001
        assert groups[1]["lr"] == pytest.approx(0.01)


class TestCheckpoint:
    def test_round_trip_restores_outputs(self, tmp_path):
        bundle = tiny_bundle(momentum=0.9, seed=1)
        x = torch.randn(4, 6)
        bundle.momentum_update()
        want_q = bundle.encode_query(x).detach()
        want_p = bundle.predict_probs(x).detach()
        path = tmp_path / "ck.bin"
        save_checkpoint(bundle, path)
        other = tiny_bundle(momentum=0.9, seed=99)
        assert not torch.equal(other.encode_query(x).detach(), want_q)
        load_checkpoint(other, path)
        assert torch.equal(other.encode_query(x).detach(), want_q)
        assert torch.equal(other.predict_probs(x).detach(), want_p)

    def test_rng_state_travels(self, tmp_path):
        bundle = tiny_bundle()
        path = tmp_path / "ck.bin"
        torch.manual_seed(123)
        torch.randn(3)  # advance the stream to a nontrivial point
        save_checkpoint(bundle, path)
        want = torch.randn(5)
        torch.manual_seed(0)
        load_checkpoint(bundle, path)
        assert torch.equal(torch.randn(5), want)

    def test_records_self_describing(self, tmp_path):
        bundle = tiny_bundle(momentum=0.5)
        path = tmp_path / "ck.bin"
        save_checkpoint(bundle, path)
        records = read_checkpoint_records(path)
        assert "encoder.net.0.weight" in records
        assert "key_encoder.net.0.weight" in records
        assert "rng.torch" in records
        np.testing.assert_array_equal(
            records["classifier.weight"],
            bundle.classifier.weight.detach().numpy())

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(tiny_bundle(), path)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(tiny_bundle(projector_dim=8), path)
        with pytest.raises(ValueError):
            load_checkpoint(tiny_bundle(projector_dim=16), path)


class TestStopGradContract:
    def test_grads_match_outside_computation(self):
        # producing keys and pseudo-labels inside or outside the loss
        # expression must not change CE+contrast gradients
        bundle = tiny_bundle(momentum=None, seed=3)
        x = torch.randn(6, 6)
        store_keys = torch.nn.functional.normalize(torch.randn(3, 2, 8),
                                                   dim=-1)

        def total_loss():
            probs = bundle.predict_probs(x)
            cats, _ = bundle.pseudo_label_batch(x)
            q = bundle.encode_query(x)
            k = bundle.encode_key(x)
            ce = L.cross_entropy_batch(probs, cats).mean()
            con = L.group_contrast_batch(q, k, cats, store_keys, 0.07).mean()
            return ce + con

        g1 = torch.autograd.grad(total_loss(),
                                 list(bundle.encoder.parameters()))
        g2 = torch.autograd.grad(total_loss(),
                                 list(bundle.encoder.parameters()))
        for a, b in zip(g1, g2):
            assert torch.equal(a, b)
