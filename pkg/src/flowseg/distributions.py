"""Probability primitives over logit space.

Shared by every model variant: the per-pixel softmax, the categorical
log-likelihood, a diagonal Gaussian field (the flow base distribution),
and a low-rank-plus-diagonal Gaussian over the flattened logits.

Shape conventions: a logit/probability field is (..., k, d) with class
axis second-to-last; image-shaped tensors (..., k, h, w) are flattened to
(..., k, h*w) with `field_to_kd`.  Flat vectors over all k*d dimensions
use the C-order flattening of (k, d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

SCALE_FLOOR = 1e-5
DIAG_FLOOR = 1e-5

_LOG_2PI = math.log(2.0 * math.pi)


def field_to_kd(x: torch.Tensor) -> torch.Tensor:
    """Flatten trailing spatial dims of (..., k, h, w) into (..., k, h*w)."""
    if x.dim() < 3:
        return x
    return x.flatten(-2)


def positive_from_raw(raw: torch.Tensor, floor: float = SCALE_FLOOR) -> torch.Tensor:
    """Softplus plus floor; keeps scales/variances strictly positive with gradients."""
    return F.softplus(raw) + floor


def softmax_k(logits: torch.Tensor, k: int, d: int) -> torch.Tensor:
    """Per-pixel softmax over the k classes.

    Accepts (..., k, d) fields or flat (..., k*d) vectors (C-order of (k, d))
    and returns (..., k, d) probabilities.
    """
    if logits.shape[-1] == d and logits.dim() >= 2 and logits.shape[-2] == k:
        field = logits
    elif logits.shape[-1] == k * d:
        field = logits.reshape(*logits.shape[:-1], k, d)
    else:
        raise ValueError(f"cannot view shape {tuple(logits.shape)} as (..., {k}, {d})")
    return torch.softmax(field, dim=-2)


def categorical_log_likelihood(y: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of the one-hot log-probability under softmax(logits).

    `y` and `logits` are (..., k, d) and must broadcast; returns the batch
    shape with class and pixel axes reduced.  Always <= 0.
    """
    if y.shape[-2:] != logits.shape[-2:]:
        raise ValueError(f"shape mismatch: labels {tuple(y.shape)} vs logits {tuple(logits.shape)}")
    log_probs = F.log_softmax(logits, dim=-2)
    return (y * log_probs).sum(dim=(-2, -1))


@dataclass
class DiagGaussianField:
    """Pixel-wise independent Gaussian over logits.

    `event_ndim` marks how many trailing dimensions form one event; leading
    dimensions of `mean` (if any) are batch dimensions, as produced by a
    conditional prior network.  By default the whole tensor is one event.
    """

    mean: torch.Tensor
    log_scale: torch.Tensor
    event_ndim: int | None = None

    def __post_init__(self):
        if self.mean.shape != self.log_scale.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_scale shape {tuple(self.log_scale.shape)}"
            )
        if self.event_ndim is None:
            self.event_ndim = self.mean.dim()
        if not 0 < self.event_ndim <= self.mean.dim():
            raise ValueError(f"event_ndim {self.event_ndim} out of range for {self.mean.dim()}-d field")

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp().clamp_min(SCALE_FLOOR)

    def _event_dims(self) -> tuple[int, ...]:
        return tuple(range(-self.event_ndim, 0))

    def log_prob(self, value: torch.Tensor) -> torch.Tensor:
        """Log-density summed over event dimensions; broadcasts over the rest."""
        scale = self.scale
        z = (value - self.mean) / scale
        return (-0.5 * z**2 - scale.log() - 0.5 * _LOG_2PI).sum(dim=self._event_dims())


def diag_sample(field: DiagGaussianField, generator: torch.Generator, m: int) -> torch.Tensor:
    """Draw m reparameterised samples, shape (m, *field.shape)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    eps = torch.randn(
        (m, *field.mean.shape), generator=generator, dtype=field.mean.dtype, device=field.mean.device
    )
    return field.mean + field.scale * eps


def diag_entropy(field: DiagGaussianField) -> torch.Tensor:
    """Closed-form entropy 0.5 * sum log(2*pi*e*scale^2), per batch element."""
    return (field.scale.log() + 0.5 * (_LOG_2PI + 1.0)).sum(dim=field._event_dims())


def diag_kl(p: DiagGaussianField, q: DiagGaussianField) -> torch.Tensor:
    """Closed-form KL(p || q) between two diagonal Gaussian fields."""
    sp, sq = p.scale, q.scale
    return (
        sq.log() - sp.log() + (sp**2 + (p.mean - q.mean) ** 2) / (2.0 * sq**2) - 0.5
    ).sum(dim=p._event_dims())


@dataclass
class LowRankGaussianSpec:
    """Gaussian over the flat (k*d,) logits with covariance diag + factors @ factors.T."""

    mean: torch.Tensor
    diag: torch.Tensor
    factors: torch.Tensor

    def __post_init__(self):
        if self.mean.dim() != 1 or self.diag.shape != self.mean.shape:
            raise ValueError("mean and diag must be matching vectors")
        if self.factors.dim() != 2 or self.factors.shape[0] != self.mean.shape[0]:
            raise ValueError(
                f"factors must be ({self.mean.shape[0]}, r), got {tuple(self.factors.shape)}"
            )
        if bool((self.diag < DIAG_FLOOR * (1.0 - 1e-9)).any()):
            raise ValueError(f"diagonal entries must be >= {DIAG_FLOOR}")

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> torch.Tensor:
        return torch.diag(self.diag) + self.factors @ self.factors.T


def lowrank_sample(spec: LowRankGaussianSpec, generator: torch.Generator, m: int) -> torch.Tensor:
    """Draw m samples mean + sqrt(diag)*eps1 + factors @ eps2, shape (m, dim).

    The samples are exactly N(mean, diag + factors factors^T) and are
    differentiable w.r.t. all three parameter tensors.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n, r = spec.factors.shape
    kw = {"generator": generator, "dtype": spec.mean.dtype, "device": spec.mean.device}
    eps1 = torch.randn((m, n), **kw)
    eps2 = torch.randn((m, r), **kw)
    return spec.mean + spec.diag.sqrt() * eps1 + eps2 @ spec.factors.T
