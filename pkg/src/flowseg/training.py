"""Optimisation loop binding datasets, networks, and objectives.

Three model variants share one loop: the low-rank Gaussian baseline over
logits ("lowrank"), the discrete-time autoregressive flow ("discrete_flow"),
and the continuous-time flow ("continuous_flow").  Unconditional toy
models share their Monte Carlo logit samples across the batch (each item's
estimator keeps the same marginal law; only cross-item correlation
changes), which is what makes 512-sample training affordable.

Model selection: lowest validation bits-per-dim for the unconditional
quadrant task, lowest validation energy distance for conditional
multi-annotator data (validation solves use a coarse 8-step fixed grid).
Training is deterministic given the seed on one execution unit; the best
and final checkpoints embed the full run config.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from . import datagen as dg
from .distributions import (
    DIAG_FLOOR,
    DiagGaussianField,
    LowRankGaussianSpec,
    categorical_log_likelihood,
    diag_entropy,
    diag_sample,
    lowrank_sample,
    positive_from_raw,
)
from .flows_continuous import IntegrationResult, SolverConfig, integrate
from .flows_discrete import (
    AutoregressiveTransform,
    CausalTransformerConditioner,
    MaskedLinearConditioner,
    iaf_forward,
    maf_log_prob,
)
from .metrics import MetricReport, SampleSet, ged_squared, hm_iou, mean_pairwise_dice
from .networks import (
    ConditionalPrior,
    EmaTracker,
    FlowImageNetwork,
    FlowNetworkSpec,
    PriorNetworkSpec,
    UnconditionalPrior,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import ObjectiveConfig, bits_per_dim, continuous_loss, kl_estimate

VARIANTS = ("lowrank", "discrete_flow", "continuous_flow")
LOG_FIELDS = ("step", "wallclock_s", "loss", "lr", "grad_norm", "eval_metric")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries the step and gradient norms."""


@dataclass
class RunConfig:
    variant: str
    dataset: str
    out_dir: str = "run"
    seed: int = 0
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_steps: int = 0
    grad_clip: float = 1.0
    ema_rate: float = 0.999
    eval_every: int = 1000
    eval_m: int = 16
    objective: str = "auto"  # auto | mc_likelihood | dual_flow | entropy_reg | continuous
    train_m: int = 512
    entropy_weight: float = 0.0
    kl_estimator: str = "low_variance"
    rank: int = 2
    fixed_prior_scale: bool = False
    flow_kind: str = "auto"  # auto | masked_linear | transformer
    patch: tuple[int, int] = (4, 4)
    embed_dim: int = 32
    mlp_width: int = 64
    attn_blocks: int = 1
    attn_heads: int = 1
    prior_width: int = 16
    prior_mults: tuple[int, ...] = (1, 2, 2)
    prior_res_blocks: int = 1
    flow_width: int = 8
    flow_mults: tuple[int, ...] = (1,)
    flow_res_blocks: int = 2
    time_embed_dim: int = 16
    solver_method: str = "euler"
    solver_steps: int = 50
    solver_tol: float = 1e-6
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.objective == "auto":
            self.objective = {
                "lowrank": "mc_likelihood",
                "discrete_flow": "mc_likelihood",
                "continuous_flow": "continuous",
            }[self.variant]
        ObjectiveConfig(self.objective, self.train_m, self.entropy_weight, self.kl_estimator)
        if not 0 < self.val_fraction + self.test_fraction < 1:
            raise ValueError("train/val/test fractions must leave a training split")
        self.patch = tuple(self.patch)
        self.prior_mults = tuple(self.prior_mults)
        self.flow_mults = tuple(self.flow_mults)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return RunConfig(**payload)

    @staticmethod
    def from_json_file(path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return RunConfig.from_dict(json.load(fh))

    def solver(self) -> SolverConfig:
        return SolverConfig(self.solver_method, self.solver_steps, self.solver_tol, self.solver_tol)


@dataclass
class SplitData:
    """Dataset arrays split deterministically by index order."""

    manifest: dg.DatasetManifest
    images: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    @property
    def conditional(self) -> bool:
        return self.manifest.generator.get("kind") != "chainshapes"

    @property
    def classes(self) -> int:
        return self.manifest.label_shape[0]


def load_split(dataset_dir: str, val_fraction: float, test_fraction: float) -> SplitData:
    manifest, images, labels = dg.load_arrays(dataset_dir)
    n = manifest.image_count
    n_val = max(1, int(round(n * val_fraction)))
    n_test = max(1, int(round(n * test_fraction)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"dataset with {n} items is too small for the requested splits")
    split_at = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    return SplitData(
        manifest=manifest,
        images={k: images[a:b] for k, (a, b) in split_at.items()},
        labels={k: labels[a:b] for k, (a, b) in split_at.items()},
    )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class LowRankToyModel(nn.Module):
    """Unconditional low-rank Gaussian over the flat (k*h*w) logits."""

    def __init__(self, classes: int, height: int, width: int, rank: int):
        super().__init__()
        self.event_shape = (classes, height, width)
        n = classes * height * width
        self.mean = nn.Parameter(torch.zeros(n))
        self.raw_diag = nn.Parameter(torch.full((n,), _softplus_inverse(1.0)))
        self.factors = nn.Parameter(torch.randn(n, rank) * 0.01)

    def spec(self) -> LowRankGaussianSpec:
        return LowRankGaussianSpec(self.mean, positive_from_raw(self.raw_diag, DIAG_FLOOR), self.factors)

    def sample_logits(self, generator: torch.Generator, m: int) -> torch.Tensor:
        flat = lowrank_sample(self.spec(), generator, m)
        return flat.reshape(m, *self.event_shape)

    def sample_label_maps(self, generator: torch.Generator, m: int) -> torch.Tensor:
        with torch.no_grad():
            return self.sample_logits(generator, m).argmax(dim=1)


def _softplus_inverse(value: float) -> float:
    return math.log(math.expm1(value))


class DiscreteFlowModel(nn.Module):
    """Learned diagonal base plus a one-pass autoregressive flow over logits."""

    def __init__(self, config: RunConfig, data: SplitData):
        super().__init__()
        k, h, w = data.manifest.label_shape
        c = data.manifest.image_shape[0]
        self.event_shape = (k, h, w)
        self.conditional = data.conditional
        kind = config.flow_kind
        if kind == "auto":
            kind = "transformer" if self.conditional else "masked_linear"
        if kind == "masked_linear":
            conditioner = MaskedLinearConditioner(k * h * w)
            patch = (1, 1)
        elif kind == "transformer":
            conditioner = CausalTransformerConditioner(
                (k, h, w),
                config.patch,
                embed_dim=config.embed_dim,
                mlp_width=config.mlp_width,
                n_blocks=config.attn_blocks,
                n_heads=config.attn_heads,
                context_channels=c if self.conditional else None,
            )
            patch = config.patch
        else:
            raise ValueError(f"unknown flow kind {kind!r}")
        self.transform = AutoregressiveTransform(conditioner, "iaf", (k, h, w), patch)
        if self.conditional:
            self.prior = ConditionalPrior(
                PriorNetworkSpec(c, k, config.prior_width, config.prior_mults, config.prior_res_blocks),
                fixed_scale=config.fixed_prior_scale,
            )
        else:
            self.prior = UnconditionalPrior(k, h, w, fixed_scale=config.fixed_prior_scale)
        if config.objective == "dual_flow":
            # Masked-direction partner scoring the sampler's draws in one
            # pass; it shares the base distribution parameters.
            if kind != "masked_linear":
                raise ValueError("the dual-flow objective is only wired for the masked linear conditioner")
            self.maf_transform = AutoregressiveTransform(MaskedLinearConditioner(k * h * w), "maf", (k, h, w), (1, 1))
        else:
            self.maf_transform = None

    def base_field(self, x: torch.Tensor | None) -> DiagGaussianField:
        return self.prior(x) if self.conditional else self.prior(None)

    def sample_cached(self, x: torch.Tensor | None, generator: torch.Generator, m: int):
        base = self.base_field(x)
        u = diag_sample(base, generator, m)
        cached = iaf_forward(u, x if self.conditional else None, self.transform)
        cached.base_log_prob = base.log_prob(u)
        return base, cached

    def sample_label_maps(self, x: torch.Tensor | None, generator: torch.Generator, m: int) -> torch.Tensor:
        with torch.no_grad():
            _, cached = self.sample_cached(x, generator, m)
            sample = cached.sample
            if sample.dim() == 5:  # (m, b, k, h, w) -> (m*b, k, h, w), batch fastest
                sample = sample.reshape(-1, *sample.shape[2:])
            return sample.argmax(dim=-3)


class ContinuousFlowModel(nn.Module):
    """Learned diagonal base plus a small time-conditioned expectation network."""

    def __init__(self, config: RunConfig, data: SplitData):
        super().__init__()
        k, h, w = data.manifest.label_shape
        c = data.manifest.image_shape[0]
        self.event_shape = (k, h, w)
        self.conditional = data.conditional
        if self.conditional:
            self.prior = ConditionalPrior(
                PriorNetworkSpec(c, k, config.prior_width, config.prior_mults, config.prior_res_blocks),
                fixed_scale=config.fixed_prior_scale,
            )
        else:
            self.prior = UnconditionalPrior(k, h, w, fixed_scale=config.fixed_prior_scale)
        self.flow = FlowImageNetwork(
            FlowNetworkSpec(
                classes=k,
                cond_channels=c if self.conditional else 0,
                width=config.flow_width,
                channel_mults=config.flow_mults,
                res_blocks=config.flow_res_blocks,
                time_embed_dim=config.time_embed_dim,
            )
        )

    def base_field(self, x: torch.Tensor | None) -> DiagGaussianField:
        return self.prior(x) if self.conditional else self.prior(None)

    def sample_result(self, x: torch.Tensor | None, generator: torch.Generator, m: int, solver: SolverConfig) -> IntegrationResult:
        base = self.base_field(x)
        u = diag_sample(base, generator, m)
        if u.dim() == 5:
            xrep = x.repeat(m, 1, 1, 1)
            u = u.reshape(-1, *u.shape[2:])
        else:
            xrep = None
        return integrate(u, xrep, self.flow, solver)

    def sample_label_maps(self, x, generator, m, solver) -> torch.Tensor:
        return self.sample_result(x, generator, m, solver).labels


def build_model(config: RunConfig, data: SplitData) -> nn.Module:
    if config.variant == "lowrank":
        if data.conditional:
            raise ValueError("the low-rank baseline is wired for the unconditional quadrant task only")
        k, h, w = data.manifest.label_shape
        return LowRankToyModel(k, h, w, config.rank)
    if config.variant == "discrete_flow":
        return DiscreteFlowModel(config, data)
    return ContinuousFlowModel(config, data)


# ---------------------------------------------------------------------------
# Loss computation
# ---------------------------------------------------------------------------


def _shared_ll_matrix(y: torch.Tensor, logit_samples: torch.Tensor) -> torch.Tensor:
    """(m, b) categorical log-likelihoods of a shared sample set.

    Computed with a single (m, n) x (n, b) product instead of materialising
    (m, b, k, d); equals categorical_log_likelihood pairwise.
    """
    log_probs = torch.log_softmax(logit_samples.flatten(-2), dim=-2)  # (m, k, d)
    return log_probs.flatten(1) @ y.flatten(-2).to(log_probs.dtype).flatten(1).T


def _shared_sample_lse(y: torch.Tensor, logit_samples: torch.Tensor) -> torch.Tensor:
    """Batched LSE likelihood with one shared sample set: (b,) estimates."""
    m = logit_samples.shape[0]
    return torch.logsumexp(_shared_ll_matrix(y, logit_samples), dim=0) - math.log(m)


def _per_item_lse(y: torch.Tensor, logit_samples: torch.Tensor) -> torch.Tensor:
    """LSE likelihood with per-item samples (m, b, k, h, w) -> (b,)."""
    m = logit_samples.shape[0]
    ll = categorical_log_likelihood(y.flatten(-2), logit_samples.flatten(-2))
    return torch.logsumexp(ll, dim=0) - math.log(m)


def compute_loss(model: nn.Module, config: RunConfig, y: torch.Tensor, x: torch.Tensor | None, generator: torch.Generator) -> torch.Tensor:
    if config.variant == "lowrank":
        samples = model.sample_logits(generator, config.train_m)
        return -_shared_sample_lse(y, samples).mean()

    if config.variant == "discrete_flow":
        base, cached = model.sample_cached(x if model.conditional else None, generator, config.train_m)
        sample = cached.sample
        if config.objective == "mc_likelihood":
            if model.conditional:
                return -_per_item_lse(y, sample).mean()
            return -_shared_sample_lse(y, sample).mean()
        if model.conditional:
            recon = categorical_log_likelihood(y.flatten(-2), sample.flatten(-2)).mean()
        else:
            recon = _shared_ll_matrix(y, sample).mean()
        if config.objective == "entropy_reg":
            entropy = diag_entropy(base).mean() + cached.log_det.mean()
            return -(recon + config.entropy_weight * entropy)
        if config.objective == "dual_flow":
            maf_scores = maf_log_prob(sample, x if model.conditional else None, model.maf_transform, base)
            kl = kl_estimate(cached.self_score, maf_scores, config.kl_estimator)
            return -(recon - kl)
        raise ValueError(f"objective {config.objective!r} does not apply to the discrete flow")

    # continuous: one base draw per item (the conditional field is already
    # batched, the unconditional one needs a batch of independent draws)
    base = model.base_field(x if model.conditional else None)
    if model.conditional:
        u = diag_sample(base, generator, 1)[0]
    else:
        u = diag_sample(base, generator, y.shape[0])
    t = torch.rand(y.shape[0], generator=generator, dtype=u.dtype)
    return continuous_loss(y, x if model.conditional else None, u, t, model.flow)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: str
    final_checkpoint: str
    best_checkpoint: str
    log_path: str
    best_metric: float
    best_step: int


def _batches(data: SplitData, batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches of (labels, images, annotator indices)."""
    labels = data.labels["train"]
    images = data.images["train"]
    n = labels.shape[0]
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            raters = rng.integers(0, labels.shape[1], size=len(idx))
            y = labels[idx, raters].astype(np.float32)
            yield torch.from_numpy(y), torch.from_numpy(images[idx])


def _grad_norm(model: nn.Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().norm() ** 2)
    return math.sqrt(total)


def learning_rate(base: float, step: int, warmup_steps: int) -> float:
    """Linear warmup: exactly (step / warmup) * base before `warmup_steps`."""
    if warmup_steps > 0 and step < warmup_steps:
        return base * step / warmup_steps
    return base


def validation_metric(model: nn.Module, config: RunConfig, data: SplitData, split: str = "val") -> float:
    """Lower-is-better selection metric: bits-per-dim for the unconditional
    task, energy distance (coarse 8-step solves for the continuous flow)
    otherwise."""
    gen = torch.Generator().manual_seed(config.seed + 9999)
    with torch.no_grad():
        if not data.conditional:
            if isinstance(model, ContinuousFlowModel):
                return _mean_path_loss(model, config, data, split, gen)
            return evaluate_bpd(model, config, data, split, config.eval_m, gen)
        solver = SolverConfig("euler", steps=8)
        labels = data.labels[split][:16]
        images = data.images[split][:16]
        geds = []
        for i in range(labels.shape[0]):
            x = torch.from_numpy(images[i : i + 1])
            preds = _model_samples(model, config, x, gen, config.eval_m, solver)
            sset = SampleSet(_onehot_np(preds), labels[i])
            geds.append(ged_squared(sset)[0])
        return float(np.mean(geds))


def _onehot_np(label_maps: torch.Tensor) -> np.ndarray:
    fg = label_maps.cpu().numpy().astype(np.uint8)
    return dg.foreground_to_onehot(fg)


def _model_samples(model, config, x, generator, m, solver) -> torch.Tensor:
    if isinstance(model, LowRankToyModel):
        return model.sample_label_maps(generator, m)
    if isinstance(model, DiscreteFlowModel):
        return model.sample_label_maps(x if model.conditional else None, generator, m)
    return model.sample_label_maps(x if model.conditional else None, generator, m, solver)


def _mean_path_loss(model: "ContinuousFlowModel", config: RunConfig, data: SplitData, split: str, generator: torch.Generator) -> float:
    """Validation proxy for the continuous flow: mean interpolation-path loss."""
    labels = torch.from_numpy(data.labels[split][:64, 0].astype(np.float32))
    base = model.base_field(None)
    u = diag_sample(base, generator, labels.shape[0])
    t = torch.rand(labels.shape[0], generator=generator, dtype=u.dtype)
    return float(continuous_loss(labels, None, u, t, model.flow))


def evaluate_bpd(model, config: RunConfig, data: SplitData, split: str, m: int, generator: torch.Generator) -> float:
    """Test-set bits-per-dim via the LSE estimator with m shared samples."""
    labels = torch.from_numpy(data.labels[split][:, 0].astype(np.float32))
    k, h, w = data.manifest.label_shape
    with torch.no_grad():
        if isinstance(model, LowRankToyModel):
            samples = model.sample_logits(generator, m)
        elif isinstance(model, DiscreteFlowModel):
            _, cached = model.sample_cached(None, generator, m)
            samples = cached.sample
        else:
            raise ValueError("bits-per-dim is reported for the unconditional logit models")
        ll = _shared_sample_lse(labels, samples)
    return bits_per_dim(float(ll.sum()), labels.shape[0] * h * w)


def train(config: RunConfig) -> TrainResult:
    os.makedirs(config.out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    data = load_split(config.dataset, config.val_fraction, config.test_fraction)
    model = build_model(config, data)
    ema = EmaTracker(model)
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay
    )
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    batches = _batches(data, config.batch_size, rng)

    log_path = os.path.join(config.out_dir, "train_log.csv")
    final_path = os.path.join(config.out_dir, "last.ckpt")
    best_path = os.path.join(config.out_dir, "best.ckpt")
    best_marker = os.path.join(config.out_dir, "best.json")
    best_metric, best_step = float("inf"), -1
    t0 = time.monotonic()

    with open(log_path, "w", newline="", encoding="utf-8") as log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(LOG_FIELDS)
        for step in range(config.steps):
            lr = learning_rate(config.lr, step, config.warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            y, x = next(batches)
            loss = compute_loss(model, config, y, x if data.conditional else None, gen)
            loss_value = float(loss.detach())
            if not bool(torch.isfinite(loss)):
                norms = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
                raise TrainingDiverged(f"non-finite loss at step {step}; last gradient norms: {norms}")
            opt.zero_grad()
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip))
            opt.step()
            ema.update(model, config.ema_rate)

            eval_metric = ""
            is_eval_step = config.eval_every > 0 and (step + 1) % config.eval_every == 0
            if is_eval_step or step + 1 == config.steps:
                metric = _ema_validation(model, ema, config, data)
                eval_metric = f"{metric:.6f}"
                if metric < best_metric:
                    best_metric, best_step = metric, step + 1
                    save_checkpoint(best_path, step + 1, config.to_dict(), model.state_dict(), ema.state_dict())
                    with open(best_marker, "w", encoding="utf-8") as fh:
                        json.dump({"step": best_step, "metric": best_metric, "checkpoint": "best.ckpt"}, fh)
            writer.writerow(
                [step, f"{time.monotonic() - t0:.3f}", f"{loss_value:.6f}", f"{lr:.8f}", f"{grad_norm:.6f}", eval_metric]
            )
    save_checkpoint(final_path, config.steps, config.to_dict(), model.state_dict(), ema.state_dict())
    if best_step < 0:
        best_metric, best_step = float("nan"), config.steps
        save_checkpoint(best_path, config.steps, config.to_dict(), model.state_dict(), ema.state_dict())
    return TrainResult(config.out_dir, final_path, best_path, log_path, best_metric, best_step)


def _ema_validation(model, ema, config, data) -> float:
    backup = {name: p.detach().clone() for name, p in model.named_parameters()}
    ema.copy_to(model)
    try:
        return validation_metric(model, config, data)
    finally:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(backup[name])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def load_model(checkpoint_path: str, dataset_dir: str | None = None, use_ema: bool = True):
    """Rebuild the model from a checkpoint's embedded config; returns (model, config, data)."""
    ckpt = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(ckpt.config)
    data = load_split(dataset_dir or config.dataset, config.val_fraction, config.test_fraction)
    model = build_model(config, data)
    model.load_state_dict(ckpt.tensors)
    if use_ema and ckpt.ema_tensors:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(ckpt.ema_tensors[name])
    model.eval()
    return model, config, data


def model_foreground_covariance(
    model: nn.Module,
    config: RunConfig,
    n_samples: int,
    seed: int,
    solver: SolverConfig | None = None,
    chunk: int = 2048,
) -> np.ndarray:
    """Empirical covariance of the sampled binary foreground channel.

    Draws label-map samples from an unconditional model in chunks and
    accumulates the (h*w, h*w) covariance; comparable directly with the
    exact generator covariance.
    """
    solver = solver or config.solver()
    gen = torch.Generator().manual_seed(seed)
    total = outer = None
    done = 0
    with torch.no_grad():
        while done < n_samples:
            m = min(chunk, n_samples - done)
            labels = _model_samples(model, config, None, gen, m, solver)
            flat = labels.cpu().numpy().reshape(m, -1).astype(np.float64)
            if total is None:
                total = np.zeros(flat.shape[1])
                outer = np.zeros((flat.shape[1], flat.shape[1]))
            total += flat.sum(axis=0)
            outer += flat.T @ flat
            done += m
    mu = total / n_samples
    cov = outer / n_samples - np.outer(mu, mu)
    return 0.5 * (cov + cov.T)


def sampled_foreground_covariance(
    checkpoint_path: str, n_samples: int, seed: int, solver: SolverConfig | None = None
) -> np.ndarray:
    model, config, _ = load_model(checkpoint_path)
    return model_foreground_covariance(model, config, n_samples, seed, solver)


def evaluate(
    checkpoint_path: str,
    dataset_dir: str | None = None,
    m: int = 16,
    solver: SolverConfig | None = None,
    split: str = "test",
    seed: int = 0,
    max_items: int | None = None,
) -> MetricReport:
    """Metric report for a checkpoint on a dataset split, using EMA weights.

    Conditional data: per-image sample sets against the annotator masks,
    averaged over images; energy distance is reported at both M=16 and the
    requested M.  Unconditional data: one set-level comparison of model
    samples against held-out label maps, plus bits-per-dim at the requested M.
    """
    model, config, data = load_model(checkpoint_path, dataset_dir)
    solver = solver or config.solver()
    gen = torch.Generator().manual_seed(seed + 4242)
    name = data.manifest.name
    with torch.no_grad():
        if data.conditional:
            labels = data.labels[split]
            images = data.images[split]
            count = labels.shape[0] if max_items is None else min(max_items, labels.shape[0])
            ged16s, gedms, divs, dices, hms = [], [], [], [], []
            for i in range(count):
                x = torch.from_numpy(images[i : i + 1])
                preds = _onehot_np(_model_samples(model, config, x, gen, m, solver))
                refs = labels[i]
                full = SampleSet(preds, refs)
                head = SampleSet(preds[: min(16, m)], refs)
                g16, _ = ged_squared(head)
                gm, diversity = ged_squared(full)
                ged16s.append(g16)
                gedms.append(gm)
                divs.append(diversity)
                dices.append(mean_pairwise_dice(full))
                hms.append(hm_iou(full))
            report = MetricReport(
                dataset=name,
                checkpoint=os.path.basename(checkpoint_path),
                m=m,
                n=labels.shape[1],
                ged16=float(np.mean(ged16s)),
                ged_m=float(np.mean(gedms)),
                diversity=float(np.mean(divs)),
                mean_dice=float(np.mean(dices)),
                hm_iou=float(np.mean(hms)),
                seed=seed,
            )
        else:
            refs = data.labels[split][:, 0]
            count = refs.shape[0] if max_items is None else min(max_items, refs.shape[0])
            refs = refs[:count]
            preds = _onehot_np(_model_samples(model, config, None, gen, m, solver))
            full = SampleSet(preds, refs)
            head = SampleSet(preds[: min(16, m)], refs)
            g16, _ = ged_squared(head)
            gm, diversity = ged_squared(full)
            bpd_gen = torch.Generator().manual_seed(seed + 777)
            bpd = (
                None
                if isinstance(model, ContinuousFlowModel)
                else evaluate_bpd(model, config, data, split, m, bpd_gen)
            )
            report = MetricReport(
                dataset=name,
                checkpoint=os.path.basename(checkpoint_path),
                m=m,
                n=count,
                ged16=float(g16),
                ged_m=float(gm),
                diversity=float(diversity),
                mean_dice=float(mean_pairwise_dice(full)),
                hm_iou=float(hm_iou(full)),
                seed=seed,
                bpd=bpd,
            )
    return report
