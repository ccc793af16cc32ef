"""Soft attention over the grid feature map, and the final classifier.

Each attention head is one 3D convolution filter spanning the full
feature depth with a d x d spatial extent. Applied to the k x r x c
feature map it yields a grid of per-cell value estimates; a softmax over
the whole grid turns those into attention weights, and the weighted sum
of feature columns gives one pooled k-vector per head. Head outputs are
concatenated (fixed creation order), passed through dropout in train
mode, and classified by a small fully connected stack.

The softmax normalizes over all grid cells jointly, so the same weights
serve any r x c without reconfiguration. d must be odd so that
zero-padding of (d-1)/2 preserves the grid shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridattn import autodiff as ad
from gridattn.autodiff import Tensor
from gridattn.errors import ConfigError
from gridattn.extractor import FeatureGrid, glorot_uniform, msra_normal
from gridattn.labels import NUM_CLASSES


@dataclass
class AttentionHead:
    """One valuation filter: kernel [k, d, d] plus a scalar bias."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.data.ndim != 3:
            raise ConfigError("head kernel must be [k, d, d]")
        k, d1, d2 = self.kernel.data.shape
        if d1 != d2:
            raise ConfigError("head kernel must be spatially square")
        if d1 % 2 == 0:
            raise ConfigError(f"head spatial extent must be odd, got {d1}")

    @property
    def spatial(self) -> int:
        return self.kernel.data.shape[1]


class AttentionModule:
    """m heads plus the concatenation -> dropout -> FC classifier."""

    def __init__(self, heads, dropout_p, fc1_w, fc1_b, fc2_w, fc2_b):
        if not heads:
            raise ConfigError("attention module needs at least one head")
        k = heads[0].kernel.data.shape[0]
        if any(h.kernel.data.shape[0] != k for h in heads):
            raise ConfigError("all heads must share the feature depth k")
        if fc1_w.data.shape[1] != len(heads) * k:
            raise ConfigError(
                f"classifier expects {fc1_w.data.shape[1]} inputs but heads concatenate "
                f"to {len(heads) * k}"
            )
        self.heads = list(heads)
        self.dropout_p = float(dropout_p)
        self.fc1_w, self.fc1_b = fc1_w, fc1_b
        self.fc2_w, self.fc2_b = fc2_w, fc2_b

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def feature_size(self) -> int:
        return self.heads[0].kernel.data.shape[0]

    def named_parameters(self) -> dict:
        params = {}
        for i, h in enumerate(self.heads):
            params[f"head{i}_w"] = h.kernel
            params[f"head{i}_b"] = h.bias
        params["fc1_w"] = self.fc1_w
        params["fc1_b"] = self.fc1_b
        params["fc2_w"] = self.fc2_w
        params["fc2_b"] = self.fc2_b
        return params


def init_attention(
    feature_size: int,
    num_heads: int = 4,
    spatial: int = 3,
    hidden: int = 16,
    dropout_p: float = 0.5,
    seed: int = 0,
    num_classes: int = NUM_CLASSES,
) -> AttentionModule:
    """Fresh attention module: MSRA kernels, Glorot FC layers, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    heads = []
    fan_in = feature_size * spatial * spatial
    for _ in range(num_heads):
        kernel = Tensor(
            msra_normal(rng, (feature_size, spatial, spatial), fan_in), requires_grad=True
        )
        heads.append(AttentionHead(kernel=kernel, bias=Tensor(np.array(0.0), requires_grad=True)))
    concat_len = num_heads * feature_size
    fc1_w = Tensor(glorot_uniform(rng, (hidden, concat_len), concat_len, hidden), requires_grad=True)
    fc1_b = Tensor(np.zeros(hidden), requires_grad=True)
    fc2_w = Tensor(glorot_uniform(rng, (num_classes, hidden), hidden, num_classes), requires_grad=True)
    fc2_b = Tensor(np.zeros(num_classes), requires_grad=True)
    return AttentionModule(heads, dropout_p, fc1_w, fc1_b, fc2_w, fc2_b)


def _as_tensor(u) -> Tensor:
    return u.u if isinstance(u, FeatureGrid) else u


def value_grid(u, head: AttentionHead) -> Tensor:
    """Per-cell value estimates: the head's filter correlated over the
    feature map with shape-preserving zero padding."""
    ut = _as_tensor(u)
    k, r, c = ut.shape
    if head.kernel.data.shape[0] != k:
        raise ValueError(
            f"head depth {head.kernel.data.shape[0]} does not match feature depth {k}"
        )
    d = head.spatial
    pad = (d - 1) // 2
    kern = head.kernel.reshape((1, k, d, d))
    v = ad.conv2d(ut, kern, stride=1, pad=(pad, pad)).reshape((r, c))
    return v + head.bias


def attend(u, head: AttentionHead):
    """Attention map and pooled feature vector for one head.

    The map is the softmax of the value grid; the pooled vector is the
    attention-weighted sum of feature columns, i.e. a convex combination
    of the per-cell features.
    """
    ut = _as_tensor(u)
    k, r, c = ut.shape
    alpha = ad.softmax2d(value_grid(ut, head))
    z = (ut * alpha.reshape((1, r, c))).sum(axis=(1, 2))
    return alpha, z


def classify(u, module: AttentionModule, mode: str = "eval", rng=None):
    """Logits over the four classes plus the per-head attention maps.

    Heads contribute in fixed creation order; dropout touches only the
    concatenated vector and only in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ut = _as_tensor(u)
    maps = []
    pooled = []
    for head in module.heads:
        alpha, z = attend(ut, head)
        maps.append(alpha)
        pooled.append(z)
    feats = pooled[0] if len(pooled) == 1 else ad.concat(pooled)
    feats = ad.dropout(feats, module.dropout_p, train=(mode == "train"), rng=rng)
    hidden = ad.relu(ad.linear(feats, module.fc1_w, module.fc1_b))
    logits = ad.linear(hidden, module.fc2_w, module.fc2_b)
    return logits, maps
