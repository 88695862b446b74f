"""Encoder / projector / classifier bundle with an optional momentum copy.

The bundle mirrors the two-branch setup common in contrastive training: a
fast branch (encoder + projector + classifier) updated by the optimizer,
and an optional slow branch (momentum copies of encoder and projector)
updated as an exponential moving average of the fast weights. Queries come
from the fast branch with gradients; keys come from the slow branch (or the
fast branch when momentum is off) under ``no_grad`` and are detached, so no
gradient ever flows through a key.

``make_bundle`` seeds ``torch.manual_seed`` before constructing anything,
so two bundles built from the same config are bitwise identical.
"""

from __future__ import annotations

import copy
import io
import struct
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .losses import argmax_lowest

_CKPT_MAGIC = b"GTCK"
# dtype codes in the checkpoint record stream
_DT_F32 = 0
_DT_U8 = 1


class MLPEncoder(nn.Module):
    """Plain ReLU MLP over flat vectors: d_in -> hidden... -> feature_dim."""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int],
                 feature_dim: int):
        super().__init__()
        layers = []
        prev = input_dim
        for h in hidden_dims:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, feature_dim))
        self.net = nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.net(x.flatten(start_dim=1))


class ConvEncoder(nn.Module):
    """Two conv blocks + global average pool, for small image tensors."""

    def __init__(self, in_channels: int, feature_dim: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(2 * width, feature_dim),
        )
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.net(x)


class Projector(nn.Module):
    """Two-layer head mapping features to the contrast space."""

    def __init__(self, feature_dim: int, projector_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Linear(feature_dim, projector_dim),
        )

    def forward(self, x):
        return self.net(x)


class PseudoLabel(NamedTuple):
    category: int
    confidence: float


class ModelBundle:
    """Holds the networks and implements the query/key/update contract."""

    def __init__(self, encoder: nn.Module, projector: Projector,
                 classifier: nn.Linear, momentum: Optional[float] = None,
                 freeze_encoder: bool = False, normalize: bool = True):
        if momentum is not None and not 0.0 <= momentum < 1.0:
            raise ValueError(
                f"momentum must be in [0, 1), got {momentum}; 1.0 would "
                "freeze the key branch forever")
        self.encoder = encoder
        self.projector = projector
        self.classifier = classifier
        self.momentum = momentum
        self.freeze_encoder = freeze_encoder
        self.normalize = normalize
        if freeze_encoder:
            for p in self.encoder.parameters():
                p.requires_grad_(False)
        if momentum is not None:
            self.key_encoder = copy.deepcopy(encoder)
            self.key_projector = copy.deepcopy(projector)
            for p in self._key_parameters():
                p.requires_grad_(False)
        else:
            self.key_encoder = None
            self.key_projector = None

    def _key_parameters(self):
        yield from self.key_encoder.parameters()
        yield from self.key_projector.parameters()

    def _fast_key_parameters(self):
        yield from self.encoder.parameters()
        yield from self.projector.parameters()

    def _finish(self, z):
        if self.normalize:
            return torch.nn.functional.normalize(z, dim=1)
        return z

    def encode_query(self, x):
        """Fast-branch projected embedding (L2-normalized by default), with
        gradients attached."""
        return self._finish(self.projector(self.encoder(x)))

    def encode_key(self, x):
        """Slow-branch embedding (fast branch when momentum is off).

        Runs under ``no_grad`` and detaches, so keys are constants to the
        optimizer: gradient reaches the encoder only through queries.
        """
        with torch.no_grad():
            if self.momentum is not None:
                z = self.key_projector(self.key_encoder(x))
            else:
                z = self.projector(self.encoder(x))
            return self._finish(z).detach()

    def momentum_update(self):
        """slow = m * slow + (1 - m) * fast, in place. No-op without momentum."""
        if self.momentum is None:
            return
        m = self.momentum
        with torch.no_grad():
            for slow, fast in zip(self._key_parameters(),
                                  self._fast_key_parameters()):
                slow.copy_(m * slow + (1.0 - m) * fast)

    def predict_probs(self, x):
        logits = self.classifier(self.encoder(x))
        return torch.softmax(logits, dim=1)

    def pseudo_label(self, x) -> PseudoLabel:
        """Predicted category and its softmax confidence for one example.

        Ties break toward the lowest category index.
        """
        with torch.no_grad():
            probs = self.predict_probs(x.unsqueeze(0))[0]
        category = int(argmax_lowest(probs))
        return PseudoLabel(category, float(probs[category]))

    def pseudo_label_batch(self, x):
        with torch.no_grad():
            probs = self.predict_probs(x)
        categories = argmax_lowest(probs, dim=1)
        confidences = probs.gather(1, categories.view(-1, 1)).squeeze(1)
        return categories, confidences

    def parameter_groups(self):
        """Partition of the trainable parameters: (backbone, fresh heads).

        The backbone group holds the encoder (empty when frozen); the fresh
        group holds the classifier and projector, which are newly
        initialized for the target task and train at a higher rate.
        """
        backbone = [] if self.freeze_encoder else list(
            self.encoder.parameters())
        fresh = list(self.classifier.parameters()) + \
            list(self.projector.parameters())
        return backbone, fresh

    def optimizer_groups(self, base_lr: float, classifier_lr_multiplier: float):
        """Param-group dicts for the optimizer: fresh heads at a multiple of
        ``base_lr``."""
        backbone, fresh = self.parameter_groups()
        groups = []
        if backbone:
            groups.append({"params": backbone, "lr": base_lr})
        groups.append({"params": fresh,
                       "lr": base_lr * classifier_lr_multiplier})
        return groups

    def modules_by_name(self):
        named = {"encoder": self.encoder, "projector": self.projector,
                 "classifier": self.classifier}
        if self.momentum is not None:
            named["key_encoder"] = self.key_encoder
            named["key_projector"] = self.key_projector
        return named

    def train(self):
        for mod in self.modules_by_name().values():
            mod.train()

    def eval(self):
        for mod in self.modules_by_name().values():
            mod.eval()


def make_bundle(input_shape, num_categories: int, feature_dim: int = 64,
                projector_dim: int = 64, hidden_dims: Sequence[int] = (128,),
                momentum: Optional[float] = None,
                freeze_encoder: bool = False, seed: int = 0,
                conv_width: int = 16, normalize: bool = True) -> ModelBundle:
    """Build a seeded bundle for flat (``(d,)``) or image (``(c, h, w)``) input."""
    if num_categories < 2:
        raise ValueError(f"need at least 2 categories, got {num_categories}")
    torch.manual_seed(seed)
    input_shape = tuple(input_shape)
    if len(input_shape) == 1:
        encoder = MLPEncoder(input_shape[0], hidden_dims, feature_dim)
    elif len(input_shape) == 3:
        encoder = ConvEncoder(input_shape[0], feature_dim, width=conv_width)
    else:
        raise ValueError(f"input_shape must be (d,) or (c, h, w), got "
                         f"{input_shape}")
    projector = Projector(feature_dim, projector_dim)
    classifier = nn.Linear(feature_dim, num_categories)
    return ModelBundle(encoder, projector, classifier, momentum=momentum,
                       freeze_encoder=freeze_encoder, normalize=normalize)


# ---------------------------------------------------------------------------
# Checkpoint blob: magic, record count, then one record per tensor.
# Record: name length (int32 LE), name bytes, dtype code (int32), ndim
# (int32), shape (int32 each), raw little-endian payload. The torch RNG
# state rides along as a uint8 record so a resumed run continues the same
# random stream.
# ---------------------------------------------------------------------------

def _iter_state_records(bundle: ModelBundle):
    for mod_name, mod in bundle.modules_by_name().items():
        for tensor_name, tensor in mod.state_dict().items():
            yield f"{mod_name}.{tensor_name}", tensor.detach().cpu()
    yield "rng.torch", torch.get_rng_state()


def _write_record(buf, name: str, array: np.ndarray, code: int):
    raw = name.encode()
    buf.write(struct.pack("<i", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<ii", code, array.ndim))
    buf.write(struct.pack(f"<{array.ndim}i", *array.shape))
    buf.write(array.tobytes())


def save_checkpoint(bundle: ModelBundle, path):
    records = list(_iter_state_records(bundle))
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<i", len(records)))
    for name, tensor in records:
        if tensor.dtype == torch.uint8:
            _write_record(buf, name, tensor.numpy().astype("<u1"), _DT_U8)
        else:
            _write_record(buf, name,
                          tensor.to(torch.float32).numpy().astype("<f4"),
                          _DT_F32)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint_records(path) -> dict:
    """Parse a checkpoint file into a ``name -> numpy array`` dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 4
    (count,) = struct.unpack_from("<i", blob, off)
    off += 4
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<i", blob, off)
        off += 4
        name = blob[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<ii", blob, off)
        off += 8
        shape = struct.unpack_from(f"<{ndim}i", blob, off)
        off += 4 * ndim
        dtype = "<u1" if code == _DT_U8 else "<f4"
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
        off += arr.nbytes
        records[name] = arr.reshape(shape).copy()
    return records


def load_checkpoint(bundle: ModelBundle, path, restore_rng: bool = True):
    """Load a checkpoint written by ``save_checkpoint`` into ``bundle``."""
    records = read_checkpoint_records(path)
    rng_state = records.pop("rng.torch", None)
    for mod_name, mod in bundle.modules_by_name().items():
        state = {}
        for tensor_name, tensor in mod.state_dict().items():
            full = f"{mod_name}.{tensor_name}"
            if full not in records:
                raise ValueError(f"{path}: missing tensor {full}")
            arr = records[full]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"{path}: shape mismatch for {full}: file has "
                    f"{tuple(arr.shape)}, model wants {tuple(tensor.shape)}")
            state[tensor_name] = torch.from_numpy(arr).to(tensor.dtype)
        mod.load_state_dict(state)
    if restore_rng and rng_state is not None:
        torch.set_rng_state(torch.from_numpy(rng_state.astype(np.uint8)))
    return bundle
