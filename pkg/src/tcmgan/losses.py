"""Loss terms for conditional WGAN-GP synthesis with tumor consistency.

Every function returns a scalar tensor. ``d_total``/``g_total`` also return
the unweighted terms so callers can log and re-check the weighted sum.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


class Mode(str, enum.Enum):
    PIX2PIX = "pix2pix"
    MGAN = "MGAN"
    TCMGAN = "TC-MGAN"
    TCMGAN_BW = "TC-MGAN-bw"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for m in cls:
            if m.value.lower().replace("-", "") == key:
                return m
        raise ConfigError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def uses_cls(self) -> bool:
        return self is not Mode.PIX2PIX

    @property
    def uses_seg(self) -> bool:
        return self in (Mode.TCMGAN, Mode.TCMGAN_BW)


@dataclass
class LossWeights:
    lambda_l1: float = 0.1
    lambda_cls: float = 10.0
    lambda_seg: float = 50.0
    lambda_gp: float = 100.0

    def validate(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be non-negative, got {v}")


class Batch(NamedTuple):
    x: torch.Tensor       # (B, 1, S, S) source
    y: torch.Tensor       # (B, 1, S, S) real target for label c
    c: torch.Tensor       # (B,) int64
    gt: torch.Tensor      # (B, 1, S, S) float {0, 1}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(y_hat, y)
    return (y_hat - y).abs().mean()


def cls_loss_logits(logits: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, c.long())


def cls_loss_real(D, x, y_c, c) -> torch.Tensor:
    """Cross-entropy of the modality head on real pairs."""
    _, logits = D(x, y_c)
    return cls_loss_logits(logits, c)


def cls_loss_fake(D, x, y_fake, c) -> torch.Tensor:
    """Cross-entropy of the modality head on synthesized pairs; grads reach G."""
    _, logits = D(x, y_fake)
    return cls_loss_logits(logits, c)


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss per sample, averaged over the batch."""
    _same_shape(prob, gt)
    p = prob.reshape(prob.shape[0], -1)
    g = gt.reshape(gt.shape[0], -1).to(p.dtype)
    inter = (p * g).sum(1)
    score = (2 * inter + smooth) / (p.sum(1) + g.sum(1) + smooth)
    return (1 - score).mean()


def tumor_consistency_loss(S, G_output, c, gt) -> torch.Tensor:
    """Dice loss of the segmentor on synthesized images.

    Whether S receives gradient depends on its ``requires_grad`` flags,
    which the trainer sets per mode.
    """
    return dice_loss(S(G_output, c), gt)


def interpolate(y_real, y_fake, eps=None, generator: Optional[torch.Generator] = None):
    """x_hat = eps * y_real + (1 - eps) * y_fake with one eps ~ U(0, 1) per sample."""
    if eps is None:
        eps = torch.rand((y_real.shape[0],) + (1,) * (y_real.dim() - 1),
                         generator=generator, dtype=y_real.dtype).to(y_real.device)
    return eps * y_real + (1 - eps) * y_fake


def gradient_penalty(D, x, y_real, y_fake, eps=None, generator: Optional[torch.Generator] = None,
                     critic=None) -> torch.Tensor:
    """Mean of (||grad_{x_hat} mean D_src(x, x_hat)||_2 - 1)^2 over samples.

    The gradient is taken with respect to the interpolant only. ``critic``
    overrides the src head with any callable (x, x_hat) -> scores.
    """
    _same_shape(y_real, y_fake)
    x_hat = interpolate(y_real.detach(), y_fake.detach(), eps, generator).requires_grad_(True)
    if critic is None:
        scores = D(x, x_hat)[0]
    else:
        scores = critic(x, x_hat)
    # per-sample mean over the patch map; samples are independent so one grad call suffices
    per_sample = scores.reshape(scores.shape[0], -1).mean(1)
    (grad,) = torch.autograd.grad(per_sample.sum(), x_hat, create_graph=True)
    norm = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def d_total(D, G, batch: Batch, weights: LossWeights, mode=Mode.TCMGAN, eps=None,
            generator: Optional[torch.Generator] = None, y_fake=None):
    """Critic objective. Returns (total, terms) with unweighted terms.

    pix2pix drops the modality term. G is evaluated without gradient.
    """
    mode = Mode.parse(mode)
    if y_fake is None:
        with torch.no_grad():
            y_fake = G(batch.x, batch.c)
    y_fake = y_fake.detach()
    src_real, logits_real = D(batch.x, batch.y)
    src_fake, _ = D(batch.x, y_fake)
    terms = {
        "d_real": -src_real.mean(),
        "d_fake": src_fake.mean(),
        "gp": gradient_penalty(D, batch.x, batch.y, y_fake, eps, generator),
    }
    total = terms["d_real"] + terms["d_fake"] + weights.lambda_gp * terms["gp"]
    if mode.uses_cls:
        terms["cls_real"] = cls_loss_logits(logits_real, batch.c)
        total = total + weights.lambda_cls * terms["cls_real"]
    return total, terms


def g_total(D, G, S, batch: Batch, weights: LossWeights, mode=Mode.TCMGAN):
    """Generator objective with per-mode gating. Returns (total, terms)."""
    mode = Mode.parse(mode)
    fake = G(batch.x, batch.c)
    src_fake, logits_fake = D(batch.x, fake)
    terms = {"g_adv": -src_fake.mean(), "l1": l1_loss(fake, batch.y)}
    total = terms["g_adv"] + weights.lambda_l1 * terms["l1"]
    if mode.uses_cls:
        terms["cls_fake"] = cls_loss_logits(logits_fake, batch.c)
        total = total + weights.lambda_cls * terms["cls_fake"]
    if mode.uses_seg:
        if S is None:
            raise ConfigError(f"mode {mode.value} needs a segmentor")
        terms["seg"] = tumor_consistency_loss(S, fake, batch.c, batch.gt)
        total = total + weights.lambda_seg * terms["seg"]
    return total, terms


def pix2pix_log_objective(d_real_prob: torch.Tensor, d_fake_prob: torch.Tensor, y_hat, y,
                          lambda_l1: float) -> torch.Tensor:
    """Reference value of the original log-loss pix2pix objective (no training path).

    E[log D(x, y)] + E[log(1 - D(x, G(x)))] + lambda_l1 * L1.
    """
    return (torch.log(d_real_prob).mean() + torch.log1p(-d_fake_prob).mean()
            + lambda_l1 * l1_loss(y_hat, y))

