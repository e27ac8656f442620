"""Training objectives shared by the model variants.

Likelihood terms reduce over (class, pixel) axes.  Labels are either a
(k, d) matrix or an image-shaped (..., k, h, w) field; sample stacks add
leading axes but must end in the label's shape.  Batched flat (b, k, d)
labels are not supported - flatten images at this boundary instead.
Objectives are differentiable end to end, including through
reparameterised base samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .distributions import DiagGaussianField, categorical_log_likelihood, diag_entropy
from .flows_discrete import CachedFlowSample
from .networks import FlowImageNetwork, flow_forward

VARIANTS = ("mc_likelihood", "dual_flow", "entropy_reg", "continuous")
KL_ESTIMATORS = ("naive", "low_variance")


@dataclass
class ObjectiveConfig:
    variant: str = "mc_likelihood"
    mc_samples: int = 512
    entropy_weight: float = 0.0
    kl_estimator: str = "low_variance"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown objective variant {self.variant!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ValueError(f"unknown KL estimator {self.kl_estimator!r}")


def _match_and_flatten(y: torch.Tensor, logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Align logits with the labels and flatten image fields to (..., k, d).

    A 2-d label map is (k, d); anything higher-dimensional is treated as an
    image field (..., k, h, w).  Logits must end in the label's full shape.
    """
    if logits.shape[-y.dim() :] != y.shape:
        raise ValueError(
            f"logit shape {tuple(logits.shape)} does not end in label shape {tuple(y.shape)}"
        )
    if y.dim() >= 3:
        return y.flatten(-2), logits.flatten(-2)
    return y, logits


def mc_log_likelihood_lse(y: torch.Tensor, logit_samples: torch.Tensor) -> torch.Tensor:
    """Monte Carlo marginal log-likelihood: LSE of per-sample log-likelihoods minus log M.

    `logit_samples` carries M samples on its leading axis; with M identical
    samples (or M=1) this reduces exactly to the single-sample categorical
    log-likelihood.
    """
    y, logit_samples = _match_and_flatten(y, logit_samples)
    per_sample = categorical_log_likelihood(y, logit_samples)
    m = per_sample.shape[0]
    return torch.logsumexp(per_sample, dim=0) - math.log(m)


def kl_estimate(iaf_self_scores: torch.Tensor, maf_scores: torch.Tensor, estimator: str = "low_variance") -> torch.Tensor:
    """Sample-based KL(sampler || scorer) from log-densities of the sampler's draws.

    naive: mean log-ratio.  low_variance: mean of expm1(r) - r with
    r = log(p_sampler / p_scorer); every term is nonnegative since
    exp(r) >= 1 + r.
    """
    if iaf_self_scores.shape != maf_scores.shape:
        raise ValueError("score vectors must have matching shapes")
    r = iaf_self_scores - maf_scores
    if estimator == "naive":
        return r.mean()
    if estimator == "low_variance":
        return (torch.expm1(r) - r).mean()
    raise ValueError(f"unknown KL estimator {estimator!r}")


def dual_flow_elbo(
    y: torch.Tensor,
    cached: CachedFlowSample,
    maf_scorer,
    kl_estimator: str = "low_variance",
) -> torch.Tensor:
    """Lower bound: mean categorical log-likelihood of the sampler's draws
    minus a sample-based KL between the sampler and the masked scorer.

    `maf_scorer(samples)` must return log-densities for the cached samples
    (one parallel pass for a masked-direction partner flow).
    """
    y_kd, samples_kd = _match_and_flatten(y, cached.sample)
    recon = categorical_log_likelihood(y_kd, samples_kd).mean()
    kl = kl_estimate(cached.self_score, maf_scorer(cached.sample), kl_estimator)
    return recon - kl


def entropy_regularised_objective(
    y: torch.Tensor,
    cached: CachedFlowSample,
    base: DiagGaussianField,
    entropy_weight: float,
) -> torch.Tensor:
    """Mean categorical log-likelihood plus beta times the sampler's entropy.

    The entropy estimate reuses the cached log-scales, H(base) + mean of the
    cached log-determinants, so no extra sampling pass is needed; with
    beta = 0 this is exactly the expected-likelihood objective.
    """
    if entropy_weight < 0:
        raise ValueError("entropy_weight must be >= 0")
    y_kd, samples_kd = _match_and_flatten(y, cached.sample)
    recon = categorical_log_likelihood(y_kd, samples_kd).mean()
    if entropy_weight == 0.0:
        return recon
    entropy = diag_entropy(base).mean() + cached.log_det.mean()
    return recon + entropy_weight * entropy


def continuous_loss(
    y: torch.Tensor,
    x: torch.Tensor | None,
    u_sample: torch.Tensor,
    t: torch.Tensor,
    network: FlowImageNetwork,
) -> torch.Tensor:
    """Expected categorical likelihood along the interpolation path, negated.

    `t` holds one uniform draw per batch element; the gradient reaches the
    prior parameters through the reparameterised `u_sample`.
    """
    if u_sample.shape != y.shape:
        raise ValueError(f"shape mismatch: base {tuple(u_sample.shape)} vs labels {tuple(y.shape)}")
    t = torch.as_tensor(t, dtype=u_sample.dtype, device=u_sample.device)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(-1, *([1] * (y.dim() - 1)))
    y_t = (1.0 - tb) * u_sample + tb * y.to(u_sample.dtype)
    logits = flow_forward(network, y_t, t, x)
    y_kd, logits_kd = _match_and_flatten(y, logits)
    return -categorical_log_likelihood(y_kd, logits_kd).mean()


def bits_per_dim(total_log_likelihood: float, pixel_count: int) -> float:
    """Negative log-likelihood per pixel in base-2 units."""
    if pixel_count <= 0:
        raise ValueError("pixel_count must be positive")
    return -float(total_log_likelihood) / (pixel_count * math.log(2.0))
