"""Layer zoo: binarized and full-precision convolutions, batch
normalization, and residual blocks with full-precision shortcuts.

Binary conv layers keep full-precision latent weights; only their sign
participates in the forward pass, which runs on the exact bit-packed
kernel.  Batch normalization precedes every sign activation (binary
nets do not train without pre-sign normalization), and residual paths
always carry full-precision values.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Tensor

PARAM_FP = "fp"
PARAM_BINARY = "binary"

ESTIMATORS = ("ste", "approx")


def _sign_op(estimator: str):
    if estimator == "ste":
        return tape.ste_sign
    if estimator == "approx":
        return tape.approx_sign
    raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


class Conv2d:
    """Full-precision convolution layer (optionally biased)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, bias: bool = False, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / (in_ch * kernel * kernel))
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Tensor(
            rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = tape.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + tape.reshape(self.bias, (1, self.out_ch, 1, 1))
        return out

    def parameters(self):
        yield "weight", self.weight, PARAM_FP
        if self.bias is not None:
            yield "bias", self.bias, PARAM_FP

    def macs(self, out_h: int, out_w: int) -> int:
        return out_h * out_w * self.in_ch * self.kernel * self.kernel * self.out_ch


class BinConv2d:
    """Binary convolution with full-precision latent weights.

    Forward binarizes activations and weights through the configured
    sign estimator, then runs the exact xnor-popcount kernel; gradients
    reach the latents via the estimator's surrogate."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, estimator: str = "ste",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        _sign_op(estimator)  # validate early
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.estimator = estimator
        # small latents keep early training inside the estimator pass-band
        self.latent_weight = Tensor(
            rng.uniform(-0.1, 0.1, (out_ch, in_ch, kernel, kernel)),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        sign = _sign_op(self.estimator)
        xb = sign(x)
        wb = sign(self.latent_weight)
        if tape.Tape.current() is None:
            # inference runs on the packed xnor-popcount kernel
            return tape.conv2d_pm1(xb, wb, self.stride, self.padding)
        # training computes the same integers via f64 GEMM on the ±1
        # operands (exact: products are ±1, sums stay far below 2^53),
        # reusing the very columns the backward pass needs anyway
        return tape.conv2d(xb, wb, self.stride, self.padding, pad_value=-1.0)

    def parameters(self):
        yield "latent_weight", self.latent_weight, PARAM_BINARY

    def macs(self, out_h: int, out_w: int) -> int:
        return out_h * out_w * self.in_ch * self.kernel * self.kernel * self.out_ch


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        """mode: 'train' (batch stats, update running), 'frozen_batch'
        (batch stats, no update; used for teacher passes), 'eval'."""
        if x.shape[1] != self.channels:
            raise ValueError(f"channel mismatch: got {x.shape[1]}, layer has {self.channels}")
        g = tape.reshape(self.gamma, (1, self.channels, 1, 1))
        b = tape.reshape(self.beta, (1, self.channels, 1, 1))
        if mode in ("train", "frozen_batch"):
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count == 0:
                raise ValueError("batchnorm: empty batch in train mode")
            out, mu, var = tape.batchnorm2d(x, self.gamma, self.beta, self.eps)
            if mode == "train":
                bessel = count / max(count - 1, 1)
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * bessel * var
            return out
        mu = tape.constant(self.running_mean.reshape(1, self.channels, 1, 1))
        var = tape.constant(self.running_var.reshape(1, self.channels, 1, 1))
        xhat = (x - mu) / tape.sqrt(var + self.eps)
        return g * xhat + b

    def parameters(self):
        yield "gamma", self.gamma, PARAM_FP
        yield "beta", self.beta, PARAM_FP


class BiRealBlock:
    """Two binary conv + BN stages, each with a full-precision shortcut
    adding the stage input to the normalized accumulator."""

    def __init__(self, channels: int, estimator: str = "ste",
                 rng: np.random.Generator | None = None):
        self.channels = channels
        self.conv1 = BinConv2d(channels, channels, estimator=estimator, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = BinConv2d(channels, channels, estimator=estimator, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        h = x + self.bn1.forward(self.conv1.forward(x), mode)
        return h + self.bn2.forward(self.conv2.forward(h), mode)

    def parameters(self):
        for sub, layer in (("conv1", self.conv1), ("bn1", self.bn1),
                           ("conv2", self.conv2), ("bn2", self.bn2)):
            for name, t, klass in layer.parameters():
                yield f"{sub}.{name}", t, klass


class FPBlock:
    """Full-precision counterpart of BiRealBlock: per-stage shortcut
    around conv(relu(x)) + BN."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        h = x + self.bn1.forward(self.conv1.forward(tape.relu(x)), mode)
        return h + self.bn2.forward(self.conv2.forward(tape.relu(h)), mode)

    def parameters(self):
        for sub, layer in (("conv1", self.conv1), ("bn1", self.bn1),
                           ("conv2", self.conv2), ("bn2", self.bn2)):
            for name, t, klass in layer.parameters():
                yield f"{sub}.{name}", t, klass


def make_block(channels: int, binary: bool, estimator: str,
               rng: np.random.Generator | None = None):
    if binary:
        return BiRealBlock(channels, estimator=estimator, rng=rng)
    return FPBlock(channels, rng=rng)


class Backbone:
    """Multi-scale convolutional trunk emitting one shared feature map
    per scale.  The stem conv and every downsampling conv stay full
    precision regardless of variant."""

    def __init__(self, widths, *, binary: bool, estimator: str = "ste",
                 stem_stride: int = 1, blocks_per_scale: int = 1,
                 rng: np.random.Generator | None = None):
        widths = list(widths)
        if len(widths) < 1:
            raise ValueError("backbone spec invalid: widths must be non-empty")
        if any(w < 1 for w in widths):
            raise ValueError(f"backbone spec invalid: widths must be >= 1, got {widths}")
        if blocks_per_scale < 1:
            raise ValueError("backbone spec invalid: blocks_per_scale must be >= 1")
        if stem_stride < 1:
            raise ValueError("backbone spec invalid: stem_stride must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.widths = widths
        self.stem_stride = stem_stride
        self.conv_in = Conv2d(3, widths[0], stride=stem_stride, rng=rng)
        self.bn_in = BatchNorm2d(widths[0])
        self.stages = []
        self.downs = []
        for i, w in enumerate(widths):
            self.stages.append(
                [make_block(w, binary, estimator, rng) for _ in range(blocks_per_scale)]
            )
            if i + 1 < len(widths):
                self.downs.append(
                    (Conv2d(w, widths[i + 1], stride=2, rng=rng), BatchNorm2d(widths[i + 1]))
                )

    def forward(self, x: Tensor, mode: str = "train") -> list[Tensor]:
        h = self.bn_in.forward(self.conv_in.forward(x), mode)
        feats = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block.forward(h, mode)
            feats.append(h)
            if i < len(self.downs):
                down, bn = self.downs[i]
                h = bn.forward(down.forward(h), mode)
        return feats

    def parameters(self):
        for name, t, klass in self.conv_in.parameters():
            yield f"conv_in.{name}", t, klass
        for name, t, klass in self.bn_in.parameters():
            yield f"bn_in.{name}", t, klass
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                for name, t, klass in block.parameters():
                    yield f"stage{i}.block{j}.{name}", t, klass
        for i, (down, bn) in enumerate(self.downs):
            for name, t, klass in down.parameters():
                yield f"down{i}.{name}", t, klass
            for name, t, klass in bn.parameters():
                yield f"down{i}.bn.{name}", t, klass


def build_backbone(widths, *, binary: bool, estimator: str = "ste",
                   stem_stride: int = 1, blocks_per_scale: int = 1,
                   rng: np.random.Generator | None = None) -> Backbone:
    return Backbone(widths, binary=binary, estimator=estimator,
                    stem_stride=stem_stride, blocks_per_scale=blocks_per_scale, rng=rng)
