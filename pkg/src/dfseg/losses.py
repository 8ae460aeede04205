"""Losses for adversarial generation, sample shaping and distillation.

Every function takes torch tensors (numpy arrays are converted) and returns a
0-d tensor that supports autograd.  Probabilities are laid out N x K x H x W.
Natural logarithms throughout, with the convention 0 * log 0 = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

SIMPLEX_ATOL = 1e-5
DISTRIBUTION_ATOL = 1e-6
WEIGHTED_DIVERSITY_EPS = 1e-6
KL_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.0
    lambda_e: float = 0.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_e"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{what} contains NaN or Inf entries")


def check_softmax_map(s, atol: float = SIMPLEX_ATOL) -> torch.Tensor:
    """Validate an N x K x H x W probability map and return it as a tensor."""
    s = _as_tensor(s)
    if s.dim() != 4:
        raise InvalidInputError(f"softmax map must be N x K x H x W, got shape {tuple(s.shape)}")
    if s.shape[1] < 2:
        raise InvalidInputError("softmax map needs at least two classes")
    if s.numel() == 0:
        raise InvalidInputError("softmax map is empty")
    with torch.no_grad():
        _check_finite(s, "softmax map")
        if (s < -atol).any() or (s > 1 + atol).any():
            raise InvalidInputError("softmax map has entries outside [0, 1]")
        err = (s.sum(dim=1) - 1).abs().max().item()
        if err > atol:
            raise InvalidInputError(f"softmax map pixels do not sum to 1 (max error {err:.3g})")
    return s


def check_distribution(w, atol: float = DISTRIBUTION_ATOL) -> torch.Tensor:
    w = _as_tensor(w)
    if w.dim() != 1 or w.numel() < 1:
        raise InvalidInputError(f"class distribution must be a non-empty vector, got shape {tuple(w.shape)}")
    with torch.no_grad():
        _check_finite(w, "class distribution")
        if (w < -atol).any() or (w > 1 + atol).any():
            raise InvalidInputError("class distribution has entries outside [0, 1]")
        err = abs(w.sum().item() - 1)
        if err > atol:
            raise InvalidInputError(f"class distribution sums to {w.sum().item():.8g}, not 1")
    return w


def entropy_loss(s) -> torch.Tensor:
    """Mean per-pixel Shannon entropy of a softmax map (nats)."""
    s = check_softmax_map(s)
    return -torch.xlogy(s, s).sum(dim=1).mean()


def entropy_loss_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Same quantity as :func:`entropy_loss`, evaluated from pre-softmax scores.

    Used on the training path, where probabilities can underflow to exactly 0
    and the gradient of s log s would blow up.
    """
    log_p = F.log_softmax(logits, dim=1)
    return -(log_p.exp() * log_p).sum(dim=1).mean()


def batch_class_distribution(s) -> torch.Tensor:
    """Average the per-pixel class probabilities over batch and space."""
    s = check_softmax_map(s)
    return s.mean(dim=(0, 2, 3))


def diversity_loss(w) -> torch.Tensor:
    """Negative entropy of the batch class distribution, sum_k w_k log w_k."""
    w = check_distribution(w)
    return torch.xlogy(w, w).sum()


def weighted_diversity_loss(w, eps: float = WEIGHTED_DIVERSITY_EPS) -> torch.Tensor:
    """Squared deviation from uniform, weighted by inverse class share.

    Rare classes (small w_k) get large weights; the denominator is clamped at
    ``eps`` so an absent class contributes a large but finite term.
    """
    w = check_distribution(w)
    k = w.numel()
    return ((1.0 / k - w) ** 2 / w.clamp_min(eps)).sum()


def _check_logits(x, what: str) -> torch.Tensor:
    x = _as_tensor(x).reshape(-1)
    if x.numel() == 0:
        raise InvalidInputError(f"{what} is empty")
    with torch.no_grad():
        _check_finite(x, what)
    return x


def adversarial_discriminator_loss(real_logits, fake_logits) -> torch.Tensor:
    """Standard GAN discriminator loss on pre-sigmoid logits.

    -mean log sigmoid(real) - mean log(1 - sigmoid(fake)), using
    log(1 - sigmoid(x)) = logsigmoid(-x).
    """
    real = _check_logits(real_logits, "real logits")
    fake = _check_logits(fake_logits, "fake logits")
    return -F.logsigmoid(real).mean() - F.logsigmoid(-fake).mean()


def adversarial_generator_loss(fake_logits) -> torch.Tensor:
    """Non-saturating generator loss, -mean log sigmoid(D(G(z)))."""
    fake = _check_logits(fake_logits, "fake logits")
    return -F.logsigmoid(fake).mean()


def generator_total_loss(l_gan, l_div, l_ent, weights: LossWeights):
    for name, value in (("l_gan", l_gan), ("l_div", l_div), ("l_ent", l_ent)):
        v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise InvalidInputError(f"{name} is not finite")
    return l_gan + weights.lambda_d * l_div + weights.lambda_e * l_ent


def kd_kl_loss(t, s, eps: float = KL_EPS) -> torch.Tensor:
    """Per-pixel KL(teacher || student), averaged over batch and pixels.

    The teacher map is detached; only ``s`` receives gradients.
    """
    t = _as_tensor(t)
    s = _as_tensor(s)
    if t.shape != s.shape:
        raise InvalidInputError(f"teacher map {tuple(t.shape)} and student map {tuple(s.shape)} differ in shape")
    t = check_softmax_map(t).detach()
    s = check_softmax_map(s)
    kl = torch.xlogy(t, t) - t * torch.log(s.clamp_min(eps))
    return kl.sum(dim=1).mean()


def kd_kl_loss_from_logits(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
                           temperature: float = 1.0) -> torch.Tensor:
    if teacher_logits.shape != student_logits.shape:
        raise InvalidInputError("teacher and student logits differ in shape")
    log_t = F.log_softmax(teacher_logits.detach() / temperature, dim=1)
    log_s = F.log_softmax(student_logits / temperature, dim=1)
    return (log_t.exp() * (log_t - log_s)).sum(dim=1).mean()
