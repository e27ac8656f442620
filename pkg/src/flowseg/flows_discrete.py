"""Discrete-time affine autoregressive flows over logit space.

A transform couples a masked conditioner (output i depends only on inputs
strictly before i in a fixed raster ordering) with a direction tag:

* ``iaf``: sampling is one parallel conditioner pass on the base noise,
  eta_i = shift_i(u_<i) + exp(log_scale_i(u_<i)) * u_i; scoring arbitrary
  points requires a sequential inverse, but a transform can score its own
  samples for free because shifts and scales are cached while sampling.
* ``maf``: scoring is one parallel conditioner pass on eta; sampling would
  be sequential (not needed here - the masked direction is only used to
  score samples drawn by an ``iaf`` partner).

Image-shaped events (k, h, w) are flattened in raster order over patch
tokens, C-order within each (k, ph, pw) token; with patch (1, 1) this is
plain pixel raster order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import DiagGaussianField, diag_entropy, diag_sample

LOG_SCALE_CLAMP = 7.0


def patchify(field: torch.Tensor, patch_shape: tuple[int, int]) -> torch.Tensor:
    """(..., k, h, w) -> (..., T, k*ph*pw) tokens in raster order over patches."""
    ph, pw = patch_shape
    *batch, k, h, w = field.shape
    if h % ph or w % pw:
        raise ValueError(f"spatial shape ({h}, {w}) not divisible by patch ({ph}, {pw})")
    gh, gw = h // ph, w // pw
    nb = len(batch)
    x = field.reshape(*batch, k, gh, ph, gw, pw)
    x = x.permute(*range(nb), nb + 1, nb + 3, nb, nb + 2, nb + 4)
    return x.reshape(*batch, gh * gw, k * ph * pw)


def unpatchify(tokens: torch.Tensor, event_shape: tuple[int, int, int], patch_shape: tuple[int, int]) -> torch.Tensor:
    """Inverse of patchify back onto (..., k, h, w)."""
    k, h, w = event_shape
    ph, pw = patch_shape
    gh, gw = h // ph, w // pw
    *batch, t, token = tokens.shape
    if t != gh * gw or token != k * ph * pw:
        raise ValueError(f"token array ({t}, {token}) does not match event {event_shape} / patch {patch_shape}")
    nb = len(batch)
    x = tokens.reshape(*batch, gh, gw, k, ph, pw)
    x = x.permute(*range(nb), nb + 2, nb, nb + 3, nb + 1, nb + 4)
    return x.reshape(*batch, k, h, w)


class MaskedLinearConditioner(nn.Module):
    """Single masked linear layer producing per-dimension shift and log-scale.

    Strictly lower-triangular masks give every output dimension dependence on
    inputs before it only.  Weights start at zero so the flow is the identity
    at initialisation.
    """

    def __init__(self, n_dims: int, context_dim: int | None = None):
        super().__init__()
        self.n_dims = n_dims
        self.block_size = 1
        self.weight_shift = nn.Parameter(torch.zeros(n_dims, n_dims))
        self.weight_scale = nn.Parameter(torch.zeros(n_dims, n_dims))
        self.bias_shift = nn.Parameter(torch.zeros(n_dims))
        self.bias_scale = nn.Parameter(torch.zeros(n_dims))
        self.register_buffer("mask", torch.ones(n_dims, n_dims).tril(-1))
        if context_dim is not None:
            self.context_proj = nn.Linear(context_dim, 2 * n_dims, bias=False)
            nn.init.zeros_(self.context_proj.weight)
        else:
            self.context_proj = None

    def forward(self, flat: torch.Tensor, context: torch.Tensor | None = None):
        shift = flat @ (self.weight_shift * self.mask).T + self.bias_shift
        log_scale = flat @ (self.weight_scale * self.mask).T + self.bias_scale
        if context is not None:
            if self.context_proj is None:
                raise ValueError("conditioner was built without a context projection")
            ctx = self.context_proj(context.flatten(-3) if context.dim() >= 3 else context)
            cs, cl = ctx.chunk(2, dim=-1)
            shift = shift + cs
            log_scale = log_scale + cl
        return shift, log_scale.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)


class LinearARConditioner(nn.Module):
    """Fixed affine conditioner eta_i = mu_i + sum_{j<i} L_ij u_j + L_ii u_i."""

    def __init__(self, chol: torch.Tensor, mu: torch.Tensor):
        super().__init__()
        self.n_dims = chol.shape[0]
        self.block_size = 1
        self.register_buffer("strict_lower", chol.tril(-1))
        self.register_buffer("log_diag", chol.diagonal().log())
        self.register_buffer("bias", mu)

    def forward(self, flat: torch.Tensor, context: torch.Tensor | None = None):
        shift = flat @ self.strict_lower.T + self.bias
        return shift, self.log_diag.expand_as(flat)


class CausalSelfAttentionBlock(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, mlp_width: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(embed_dim)
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.attn_out = nn.Linear(embed_dim, embed_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = nn.Sequential(nn.Linear(embed_dim, mlp_width), nn.GELU(), nn.Linear(mlp_width, embed_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, e = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = (z.reshape(b, t, self.n_heads, -1).transpose(1, 2) for z in (q, k, v))
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(b, t, e)
        x = x + self.attn_out(attn)
        return x + self.mlp(self.norm2(x))


class CausalTransformerConditioner(nn.Module):
    """Token-level autoregressive conditioner over image patches.

    The token sequence is shifted right behind a learned start token, so the
    (shift, log-scale) pair for patch i depends on patches strictly before i;
    conditioning image features are added unshifted (they are exogenous).
    """

    def __init__(
        self,
        event_shape: tuple[int, int, int],
        patch_shape: tuple[int, int],
        embed_dim: int = 64,
        mlp_width: int = 256,
        n_blocks: int = 1,
        n_heads: int = 1,
        context_channels: int | None = None,
    ):
        super().__init__()
        k, h, w = event_shape
        ph, pw = patch_shape
        if h % ph or w % pw:
            raise ValueError(f"spatial shape ({h}, {w}) not divisible by patch ({ph}, {pw})")
        self.event_shape = event_shape
        self.patch_shape = patch_shape
        self.token_dim = k * ph * pw
        self.n_tokens = (h // ph) * (w // pw)
        self.n_dims = self.n_tokens * self.token_dim
        self.block_size = self.token_dim
        self.in_proj = nn.Linear(self.token_dim, embed_dim)
        self.start = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos = nn.Parameter(torch.randn(1, self.n_tokens, embed_dim) * 0.02)
        if context_channels is not None:
            self.context_proj = nn.Linear(context_channels * ph * pw, embed_dim)
        else:
            self.context_proj = None
        self.blocks = nn.ModuleList(
            CausalSelfAttentionBlock(embed_dim, n_heads, mlp_width) for _ in range(n_blocks)
        )
        self.out_norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, 2 * self.token_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, flat: torch.Tensor, context: torch.Tensor | None = None):
        lead = flat.shape[:-1]
        tokens = flat.reshape(-1, self.n_tokens, self.token_dim)
        x = self.in_proj(tokens)
        x = torch.cat([self.start.expand(x.shape[0], 1, -1), x[:, :-1]], dim=1)
        x = x + self.pos
        if context is not None:
            if self.context_proj is None:
                raise ValueError("conditioner was built without a context projection")
            ctx_tokens = patchify(context, self.patch_shape)
            ctx = self.context_proj(ctx_tokens).reshape(-1, self.n_tokens, x.shape[-1])
            if ctx.shape[0] != x.shape[0]:
                # flat may carry extra sample dims in front of the context
                # batch: (m, b, n) flattens with b fastest, so tile whole
                # context blocks rather than interleaving.
                if x.shape[0] % ctx.shape[0]:
                    raise ValueError("context batch does not divide the flow batch")
                ctx = ctx.repeat(x.shape[0] // ctx.shape[0], 1, 1)
            x = x + ctx
        for block in self.blocks:
            x = block(x)
        out = self.head(self.out_norm(x))
        shift, log_scale = out.chunk(2, dim=-1)
        shift = shift.reshape(*lead, self.n_dims)
        log_scale = log_scale.reshape(*lead, self.n_dims)
        return shift, log_scale.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)


class AutoregressiveTransform(nn.Module):
    """Affine autoregressive bijection between base noise and logits."""

    def __init__(
        self,
        conditioner: nn.Module,
        direction: str,
        event_shape: tuple[int, ...],
        patch_shape: tuple[int, int] | None = None,
    ):
        super().__init__()
        if direction not in ("iaf", "maf"):
            raise ValueError(f"unknown direction {direction!r}")
        self.conditioner = conditioner
        self.direction = direction
        self.event_shape = tuple(event_shape)
        if len(self.event_shape) == 3:
            self.patch_shape = patch_shape or (1, 1)
        elif len(self.event_shape) == 1:
            self.patch_shape = None
        else:
            raise ValueError("event_shape must be (n,) or (k, h, w)")
        self.n_dims = int(math.prod(self.event_shape))
        cond_dims = getattr(conditioner, "n_dims", self.n_dims)
        if cond_dims != self.n_dims:
            raise ValueError(f"conditioner covers {cond_dims} dims, event has {self.n_dims}")

    def flatten_event(self, x: torch.Tensor) -> torch.Tensor:
        if self.patch_shape is None:
            return x
        return patchify(x, self.patch_shape).flatten(-2)

    def unflatten_event(self, flat: torch.Tensor) -> torch.Tensor:
        if self.patch_shape is None:
            return flat
        *batch, n = flat.shape
        token_dim = self.event_shape[0] * self.patch_shape[0] * self.patch_shape[1]
        tokens = flat.reshape(*batch, n // token_dim, token_dim)
        return unpatchify(tokens, self.event_shape, self.patch_shape)


@dataclass
class CachedFlowSample:
    """One sampling pass worth of flow state, enough to self-score for free."""

    sample: torch.Tensor
    base_noise: torch.Tensor
    shift: torch.Tensor
    log_scale: torch.Tensor
    log_det: torch.Tensor
    base_log_prob: torch.Tensor | None = None

    @property
    def self_score(self) -> torch.Tensor:
        """log p(sample) under the flow that produced it: log p_base(u) - log|det J|."""
        if self.base_log_prob is None:
            raise ValueError("sample was cached without its base log-probability")
        return self.base_log_prob - self.log_det


def iaf_forward(u: torch.Tensor, context: torch.Tensor | None, transform: AutoregressiveTransform) -> CachedFlowSample:
    """One parallel conditioner pass mapping base noise to logits, caching state."""
    if transform.direction != "iaf":
        raise ValueError("iaf_forward needs a transform tagged 'iaf'")
    flat_u = transform.flatten_event(u)
    shift, log_scale = transform.conditioner(flat_u, context)
    flat_eta = shift + log_scale.exp() * flat_u
    return CachedFlowSample(
        sample=transform.unflatten_event(flat_eta),
        base_noise=u,
        shift=shift,
        log_scale=log_scale,
        log_det=log_scale.sum(dim=-1),
    )


def iaf_inverse(eta: torch.Tensor, context: torch.Tensor | None, transform: AutoregressiveTransform) -> torch.Tensor:
    """Sequential inverse of the iaf-direction map; one conditioner pass per block.

    Testing / slow-scoring path: cost is n_dims / block_size conditioner passes.
    """
    if transform.direction != "iaf":
        raise ValueError("iaf_inverse needs a transform tagged 'iaf'")
    flat_eta = transform.flatten_event(eta)
    block = getattr(transform.conditioner, "block_size", 1)
    known = torch.zeros_like(flat_eta)
    for start in range(0, transform.n_dims, block):
        shift, log_scale = transform.conditioner(known, context)
        sl = slice(start, start + block)
        solved = (flat_eta[..., sl] - shift[..., sl]) * torch.exp(-log_scale[..., sl])
        known = known.clone()
        known[..., sl] = solved
    return transform.unflatten_event(known)


def maf_log_prob(
    eta: torch.Tensor,
    context: torch.Tensor | None,
    transform: AutoregressiveTransform,
    base: DiagGaussianField,
) -> torch.Tensor:
    """Change-of-variables log-density of eta under the transform and base.

    For 'maf' transforms the noise is recovered in a single parallel pass;
    'iaf' transforms fall back to the sequential inverse.
    """
    if transform.direction == "maf":
        flat_eta = transform.flatten_event(eta)
        shift, log_scale = transform.conditioner(flat_eta, context)
        flat_u = (flat_eta - shift) * torch.exp(-log_scale)
        u = transform.unflatten_event(flat_u)
    else:
        u = iaf_inverse(eta, context, transform)
        flat_u = transform.flatten_event(u)
        _, log_scale = transform.conditioner(flat_u, context)
    return base.log_prob(u) - log_scale.sum(dim=-1)


def linear_ar_from_cholesky(chol: torch.Tensor, mu: torch.Tensor) -> AutoregressiveTransform:
    """Linear autoregressive transform pushing N(0, I) to exactly N(mu, L L^T).

    `chol` must be lower triangular with a strictly positive diagonal.  The
    transform is tagged 'iaf' (the construction reads the base noise), so
    scoring goes through the sequential inverse.
    """
    chol = torch.as_tensor(chol)
    mu = torch.as_tensor(mu, dtype=chol.dtype)
    if chol.dim() != 2 or chol.shape[0] != chol.shape[1]:
        raise ValueError("Cholesky factor must be square")
    if not torch.equal(chol, chol.tril()):
        raise ValueError("Cholesky factor must be lower triangular")
    if bool((chol.diagonal() <= 0).any()):
        raise ValueError("Cholesky factor needs a strictly positive diagonal")
    if mu.shape != (chol.shape[0],):
        raise ValueError("mean vector does not match the factor dimension")
    conditioner = LinearARConditioner(chol, mu)
    return AutoregressiveTransform(conditioner, "iaf", event_shape=(chol.shape[0],))


def sample_flow_cached(
    base: DiagGaussianField,
    transform: AutoregressiveTransform,
    generator: torch.Generator,
    m: int,
    context: torch.Tensor | None = None,
) -> CachedFlowSample:
    """Draw m base samples, push them through the flow, and record self-scores."""
    u = diag_sample(base, generator, m)
    cached = iaf_forward(u, context, transform)
    cached.base_log_prob = base.log_prob(u)
    return cached


def iaf_entropy_estimate(
    base: DiagGaussianField,
    transform: AutoregressiveTransform,
    generator: torch.Generator,
    m: int,
    context: torch.Tensor | None = None,
) -> torch.Tensor:
    """Entropy of the flow's output distribution, estimated from m base draws.

    H(flow) = H(base) + E_u[sum_i log_scale_i(u)]; exact (for every m) when
    the log-scales do not depend on the input.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    u = diag_sample(base, generator, m)
    flat_u = transform.flatten_event(u)
    _, log_scale = transform.conditioner(flat_u, context)
    return diag_entropy(base) + log_scale.sum(dim=-1).mean()
