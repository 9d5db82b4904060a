"""Variational information bottleneck layer.

A pair of full-precision 1x1 conv heads maps shared features to the
mean and log-variance of a per-pixel Gaussian posterior.  Training
samples it with the reparameterization trick; evaluation uses the mean.
The closed-form KL against a standard normal prior is the bottleneck
regularizer, weighted by beta in the total objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .nn import Conv2d
from .tape import Tensor

LOGVAR_CLAMP = 8.0


@dataclass
class GaussianPosterior:
    mu: Tensor
    logvar: Tensor


class VIBLayer:
    """Gaussian encoder over backbone output channels."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 init_logvar: float = -2.0):
        self.channels = channels
        self.mu_head = Conv2d(channels, channels, kernel=1, padding=0, bias=True, rng=rng)
        self.logvar_head = Conv2d(channels, channels, kernel=1, padding=0, bias=True, rng=rng)
        # start with moderate noise; the KL term owns the pull toward sigma=1
        self.logvar_head.bias.values[:] = init_logvar

    def parameters(self):
        for name, t, klass in self.mu_head.parameters():
            yield f"mu_head.{name}", t, klass
        for name, t, klass in self.logvar_head.parameters():
            yield f"logvar_head.{name}", t, klass


def vib_encode(layer: VIBLayer, features: Tensor) -> GaussianPosterior:
    if features.shape[1] != layer.channels:
        raise ValueError(
            f"channel mismatch: features have {features.shape[1]}, layer has {layer.channels}"
        )
    mu = layer.mu_head.forward(features)
    logvar = tape.clamp(layer.logvar_head.forward(features), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return GaussianPosterior(mu=mu, logvar=logvar)


def reparameterize(post: GaussianPosterior, rng: np.random.Generator | None,
                   mode: str = "train") -> Tensor:
    """z = mu + exp(logvar/2) * eps in train mode; z = mu otherwise."""
    if mode != "train":
        return post.mu
    if rng is None:
        raise ValueError("reparameterize: train mode requires an rng")
    eps = tape.constant(rng.standard_normal(post.mu.shape))
    return post.mu + tape.exp(post.logvar * 0.5) * eps


def kl_loss(post: GaussianPosterior) -> Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, logvar = post.mu, post.logvar
    return tape.tmean(0.5 * (mu * mu + tape.exp(logvar) - 1.0 - logvar))


def vib_objective(task_losses: Tensor, kl: Tensor | float, beta: float) -> Tensor:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return task_losses + beta * kl
