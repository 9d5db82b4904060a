"""Cross-task feature fusion through binarized attention gates.

For each target task, a binary conv over its own feature map produces a
{0,1} gate; messages from the other tasks (one binary conv per source
task, shared across targets) are gated, summed onto the target's
features and re-binarized.  A sigmoid-gated full-precision counterpart
provides the same structure for never-binarized models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .nn import PARAM_BINARY, PARAM_FP, BinConv2d, Conv2d, _sign_op
from .tape import Tensor


@dataclass
class MMDWeights:
    """Per-task attention convs and per-source-task message convs."""

    attention: list[BinConv2d]
    message: list[BinConv2d]

    @classmethod
    def create(cls, num_tasks: int, channels: int, estimator: str = "ste",
               rng: np.random.Generator | None = None) -> "MMDWeights":
        if num_tasks == 1:
            # fusion degenerates to the identity; no weights to hold
            return cls(attention=[], message=[])
        return cls(
            attention=[BinConv2d(channels, channels, estimator=estimator, rng=rng)
                       for _ in range(num_tasks)],
            message=[BinConv2d(channels, channels, estimator=estimator, rng=rng)
                     for _ in range(num_tasks)],
        )

    def parameters(self):
        for i, conv in enumerate(self.attention):
            for name, t, klass in conv.parameters():
                yield f"attention{i}.{name}", t, klass
        for i, conv in enumerate(self.message):
            for name, t, klass in conv.parameters():
                yield f"message{i}.{name}", t, klass


def binarized_attention(features_k: Tensor, attention_conv: BinConv2d) -> Tensor:
    """Gate map bool(conv(F)) in {0,1}; bool = (sign+1)/2 so the gradient
    follows the same estimator pathway as every other sign."""
    acc = attention_conv.forward(features_k)
    sign = _sign_op(attention_conv.estimator)
    return (sign(acc) + 1.0) * 0.5


def _binarize_features(features: list[Tensor], estimator: str) -> list[Tensor]:
    sign = _sign_op(estimator)
    return [sign(f) for f in features]


def _messages(features_b: list[Tensor], weights: MMDWeights) -> list[Tensor]:
    return [conv.forward(f) for conv, f in zip(weights.message, features_b)]


def mmd_fuse(features: list[Tensor], weights: MMDWeights, k: int,
             estimator: str = "ste") -> Tensor:
    """Fused binary features for target task k:
    sign[F_k + sum_{t != k} gate_k * message_t]."""
    n_tasks = len(features)
    if not 0 <= k < n_tasks:
        raise ValueError(f"target task {k} out of range for {n_tasks} tasks")
    sign = _sign_op(estimator)
    if n_tasks == 1:
        return sign(sign(features[0]))
    _check_channels(features, weights)
    features_b = _binarize_features(features, estimator)
    gate = binarized_attention(features_b[k], weights.attention[k])
    msgs = _messages(features_b, weights)
    pre = features_b[k]
    for t in range(n_tasks):
        if t == k:
            continue
        pre = pre + gate * msgs[t]
    return sign(pre)


def mmd_all_tasks(features: list[Tensor], weights: MMDWeights,
                  estimator: str = "ste") -> list[Tensor]:
    """Apply the fusion for every target simultaneously from the same
    input set; messages are computed once per source task."""
    n_tasks = len(features)
    sign = _sign_op(estimator)
    if n_tasks == 1:
        return [sign(sign(features[0]))]
    _check_channels(features, weights)
    features_b = _binarize_features(features, estimator)
    msgs = _messages(features_b, weights)
    fused = []
    for k in range(n_tasks):
        gate = binarized_attention(features_b[k], weights.attention[k])
        pre = features_b[k]
        for t in range(n_tasks):
            if t == k:
                continue
            pre = pre + gate * msgs[t]
        fused.append(sign(pre))
    return fused


def _check_channels(features: list[Tensor], weights: MMDWeights):
    if len(weights.attention) < len(features) or len(weights.message) < len(features):
        raise ValueError(
            f"weights cover {len(weights.attention)} tasks, got {len(features)} feature maps"
        )
    for t, f in enumerate(features):
        conv = weights.message[t]
        if f.shape[1] != conv.in_ch:
            raise ValueError(
                f"task {t}: message conv expects {conv.in_ch} channels, features have {f.shape[1]}"
            )


class BinaryMMD:
    """Layer wrapper used by the model graph (one per scale)."""

    def __init__(self, num_tasks: int, channels: int, estimator: str = "ste",
                 rng: np.random.Generator | None = None):
        self.estimator = estimator
        self.weights = MMDWeights.create(num_tasks, channels, estimator, rng)

    def forward(self, features: list[Tensor], mode: str = "train") -> list[Tensor]:
        return mmd_all_tasks(features, self.weights, self.estimator)

    def parameters(self):
        yield from self.weights.parameters()


class SigmoidMMD:
    """Full-precision counterpart: sigmoid gates, no binarization."""

    def __init__(self, num_tasks: int, channels: int,
                 rng: np.random.Generator | None = None):
        if num_tasks == 1:
            self.attention, self.message = [], []
        else:
            self.attention = [Conv2d(channels, channels, rng=rng) for _ in range(num_tasks)]
            self.message = [Conv2d(channels, channels, rng=rng) for _ in range(num_tasks)]

    def forward(self, features: list[Tensor], mode: str = "train") -> list[Tensor]:
        n_tasks = len(features)
        if n_tasks == 1:
            return [features[0]]
        msgs = [conv.forward(f) for conv, f in zip(self.message, features)]
        fused = []
        for k in range(n_tasks):
            gate = tape.sigmoid(self.attention[k].forward(features[k]))
            pre = features[k]
            for t in range(n_tasks):
                if t == k:
                    continue
                pre = pre + gate * msgs[t]
            fused.append(pre)
        return fused

    def parameters(self):
        for i, conv in enumerate(self.attention):
            for name, t, klass in conv.parameters():
                yield f"attention{i}.{name}", t, klass
        for i, conv in enumerate(self.message):
            for name, t, klass in conv.parameters():
                yield f"message{i}.{name}", t, klass
