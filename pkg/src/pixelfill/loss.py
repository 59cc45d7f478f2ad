"""Masked reconstruction and adversarial losses.

The L1 term is restricted to the corrupted region and normalized by the
number of masked elements so its magnitude is comparable across mask
geometries (a centre square corrupts 1/4 of the pixels, boundary
reconstruction 9/16). The adversarial terms operate on per-patch critic
logits: judgements are passed through a sigmoid, clamped away from 0 and
1, and averaged over the judgement map and the batch.

Functions returning gradients are paired with the scalar versions so the
trainer never needs an autodiff graph.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor_ops
from .model import DiscriminatorModel, discriminator_forward

LOG_ETA = 1e-7  # judgements are clamped to [eta, 1 - eta] before the log

GAN_VARIANTS = ("non_saturating", "minimax")


@dataclass(frozen=True)
class LossConfig:
    lambda_weight: float = 0.999
    gan_variant: str = "non_saturating"

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError(
                f"lambda must be in [0, 1], got {self.lambda_weight}"
            )
        if self.gan_variant not in GAN_VARIANTS:
            raise ValueError(
                f"gan_variant must be one of {GAN_VARIANTS}, "
                f"got {self.gan_variant!r}"
            )


def _broadcast_mask(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Mask as a rank-4 array broadcastable over ``like``'s channels."""
    m = mask
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[-2:] != like.shape[-2:]:
        raise ValueError(
            f"mask spatial dims {mask.shape} do not match tensor {like.shape}"
        )
    return m.astype(like.dtype, copy=False)


def masked_l1(output: np.ndarray, x: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over the masked elements only.

    Out-of-mask differences contribute exactly zero. An empty mask yields
    0 with a warning.
    """
    m = _broadcast_mask(mask, output)
    count = float(np.broadcast_to(m, output.shape).sum())
    if count == 0:
        warnings.warn("masked_l1 over an empty mask; returning 0", stacklevel=2)
        return 0.0
    diff = tensor_ops.mul(tensor_ops.sub(output, x), m)
    return float(np.abs(diff).sum() / count)


def masked_l1_grad(
    output: np.ndarray, x: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Gradient of ``masked_l1`` w.r.t. ``output``: mask * sign(diff) / count."""
    m = _broadcast_mask(mask, output)
    count = float(np.broadcast_to(m, output.shape).sum())
    if count == 0:
        return np.zeros_like(output)
    g = np.sign(output - x) * m / count
    return g.astype(output.dtype, copy=False)


def _clamped_sigmoid(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid plus a mask of entries left unclamped (grad flows there)."""
    z = logits.astype(np.float64, copy=False)
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    free = (p > LOG_ETA) & (p < 1.0 - LOG_ETA)
    return np.clip(p, LOG_ETA, 1.0 - LOG_ETA), free


def discriminator_loss_from_logits(
    real_logits: np.ndarray, fake_logits: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """-[log D(real) + log(1 - D(fake))], averaged per judgement map.

    Returns the scalar loss and its gradients w.r.t. both logit maps.
    """
    p_real, free_r = _clamped_sigmoid(real_logits)
    p_fake, free_f = _clamped_sigmoid(fake_logits)
    loss = float(-np.log(p_real).mean() - np.log(1.0 - p_fake).mean())
    g_real = (-(1.0 - p_real) / p_real.size) * free_r
    g_fake = (p_fake / p_fake.size) * free_f
    return (
        loss,
        g_real.astype(real_logits.dtype, copy=False),
        g_fake.astype(fake_logits.dtype, copy=False),
    )


def generator_adv_loss_from_logits(
    fake_logits: np.ndarray, variant: str = "non_saturating"
) -> tuple[float, np.ndarray]:
    """Adversarial term for the generator, with its logit gradient.

    ``non_saturating`` is -log D(fake); ``minimax`` is +log(1 - D(fake)).
    """
    p, free = _clamped_sigmoid(fake_logits)
    if variant == "non_saturating":
        loss = float(-np.log(p).mean())
        g = (-(1.0 - p) / p.size) * free
    elif variant == "minimax":
        loss = float(np.log(1.0 - p).mean())
        g = (-p / p.size) * free
    else:
        raise ValueError(f"unknown gan variant {variant!r}")
    return loss, g.astype(fake_logits.dtype, copy=False)


def discriminator_loss(
    disc: DiscriminatorModel, real: np.ndarray, fake_composited: np.ndarray
) -> float:
    """Critic loss on a real batch and an already-composited fake batch.

    The fake batch must have its ground-truth pixels restored before it
    reaches the critic, so judgements concentrate on region/context
    consistency.
    """
    real_logits, _ = discriminator_forward(disc, real)
    fake_logits, _ = discriminator_forward(disc, fake_composited)
    loss, _, _ = discriminator_loss_from_logits(real_logits, fake_logits)
    return loss


def generator_adv_loss(
    disc: DiscriminatorModel,
    fake_composited: np.ndarray,
    variant: str = "non_saturating",
) -> float:
    fake_logits, _ = discriminator_forward(disc, fake_composited)
    loss, _ = generator_adv_loss_from_logits(fake_logits, variant)
    return loss


def total_loss(l1: float, adv: float, config: LossConfig) -> float:
    """lambda * L1 + (1 - lambda) * adversarial."""
    lam = config.lambda_weight
    return lam * l1 + (1.0 - lam) * adv
