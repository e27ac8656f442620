"""Parameter-bearing networks with fixed input/output contracts.

* prior networks map an input image (or nothing, for the unconditional
  toy task) to a diagonal Gaussian field over the logits, with 2k output
  channels (mean and log-scale per class);
* the continuous-time flow network maps an interpolation state, a time in
  [0, 1], and optional conditioning to k logit channels, and is kept much
  smaller than the prior so that solving the sampling ODE stays cheap;
* an exponential-moving-average shadow of the parameters is maintained
  during training and used for evaluation.

Checkpoints are a self-describing single-file container: a JSON header
(version, step, run config, tensor directory) followed by raw
little-endian float32 data, so save/load round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import DiagGaussianField

CHECKPOINT_MAGIC = b"FLOWSEGCKPT\n"
CHECKPOINT_VERSION = 1


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class TimeEmbedding(nn.Module):
    """Sinusoidal features of t in [0, 1] followed by a small MLP."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError("time embedding dimension must be even")
        half = dim // 2
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(1000.0), half)))
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None] * self.freqs[None, :]
        feats = torch.cat([angles.sin(), angles.cos()], dim=-1)
        return self.mlp(feats)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with group norms; time conditioning enters as a
    scale and shift applied after the second norm so it survives
    normalisation."""

    def __init__(self, cin: int, cout: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * cout) if time_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if temb is not None and self.time_proj is not None:
            scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
            h = h * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        return x + self.proj(attn.transpose(1, 2).reshape(b, c, h, w))


@dataclass
class PriorNetworkSpec:
    """Encoder-decoder producing a 2k-channel mean / log-scale field."""

    in_channels: int
    classes: int
    width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    res_blocks: int = 1
    attention_stages: tuple[int, ...] = ()


@dataclass
class FlowNetworkSpec:
    """Smaller time-conditioned encoder-decoder producing k logit channels."""

    classes: int
    cond_channels: int = 0
    width: int = 8
    channel_mults: tuple[int, ...] = (1,)
    res_blocks: int = 2
    attention_stages: tuple[int, ...] = ()
    time_embed_dim: int = 16


class EncoderDecoder(nn.Module):
    """Small UNet: stages of residual blocks with stride-2 down/upsampling,
    optional self-attention per stage, optional time conditioning, and a
    zero-initialised output head."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        width: int,
        channel_mults: tuple[int, ...],
        res_blocks: int,
        attention_stages: tuple[int, ...] = (),
        time_embed_dim: int | None = None,
    ):
        super().__init__()
        self.time_embed = TimeEmbedding(time_embed_dim) if time_embed_dim else None
        tdim = time_embed_dim
        widths = [width * m for m in channel_mults]
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cur = widths[0]
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for j in range(res_blocks):
                blocks.append(ResBlock(cur if j == 0 else w, w, tdim))
            self.down_blocks.append(blocks)
            self.down_attn.append(AttentionBlock(w) if i in attention_stages else nn.Identity())
            cur = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

        self.mid = ResBlock(cur, cur, tdim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            blocks = nn.ModuleList()
            for j in range(res_blocks):
                blocks.append(ResBlock(cur + w if j == 0 else w, w, tdim))
            self.up_blocks.append(blocks)
            self.up_attn.append(AttentionBlock(w) if i in attention_stages else nn.Identity())
            cur = w
            if i > 0:
                self.upsamples.append(nn.Conv2d(w, w, 3, padding=1))

        self.out_norm = nn.GroupNorm(_groups(cur), cur)
        self.out_conv = nn.Conv2d(cur, out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        temb = None
        if self.time_embed is not None:
            if t is None:
                raise ValueError("time-conditioned network called without t")
            if t.dim() == 0:
                t = t.expand(x.shape[0])
            temb = self.time_embed(t)
        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
            h = self.down_attn[i](h)
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = self.downsamples[i](h)
        h = self.mid(h, temb)
        for j, blocks in enumerate(self.up_blocks):
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
                h = self.upsamples[j - 1](h)
            h = torch.cat([h, skip], dim=1)
            for block in blocks:
                h = block(h, temb)
            h = self.up_attn[j](h)
        return self.out_conv(F.silu(self.out_norm(h)))


class ConditionalPrior(nn.Module):
    """Encoder-decoder from input image to per-class mean / log-scale field."""

    def __init__(self, spec: PriorNetworkSpec, fixed_scale: bool = False):
        super().__init__()
        self.classes = spec.classes
        self.fixed_scale = fixed_scale
        self.net = EncoderDecoder(
            spec.in_channels,
            2 * spec.classes,
            spec.width,
            spec.channel_mults,
            spec.res_blocks,
            spec.attention_stages,
        )

    def forward(self, x: torch.Tensor) -> DiagGaussianField:
        out = self.net(x)
        mean, log_scale = out.chunk(2, dim=1)
        if self.fixed_scale:
            log_scale = torch.zeros_like(log_scale)
        return DiagGaussianField(mean, log_scale, event_ndim=3)


class UnconditionalPrior(nn.Module):
    """Free mean / log-scale parameters; the degenerate no-input case."""

    def __init__(self, classes: int, height: int, width: int, fixed_scale: bool = False):
        super().__init__()
        self.classes = classes
        self.fixed_scale = fixed_scale
        self.mean = nn.Parameter(torch.zeros(classes, height, width))
        if fixed_scale:
            self.register_buffer("log_scale", torch.zeros(classes, height, width))
        else:
            self.log_scale = nn.Parameter(torch.zeros(classes, height, width))

    def forward(self, x: torch.Tensor | None = None) -> DiagGaussianField:
        return DiagGaussianField(self.mean, self.log_scale, event_ndim=3)


class FlowImageNetwork(nn.Module):
    """Time-conditioned network approximating the per-pixel class expectation
    along the interpolation path; outputs k logit channels."""

    def __init__(self, spec: FlowNetworkSpec):
        super().__init__()
        self.classes = spec.classes
        self.cond_channels = spec.cond_channels
        self.net = EncoderDecoder(
            spec.classes + spec.cond_channels,
            spec.classes,
            spec.width,
            spec.channel_mults,
            spec.res_blocks,
            spec.attention_stages,
            time_embed_dim=spec.time_embed_dim,
        )

    def forward(self, y_t: torch.Tensor, t: torch.Tensor, x: torch.Tensor | None = None) -> torch.Tensor:
        if self.cond_channels:
            if x is None:
                raise ValueError("conditional flow network called without an input image")
            if x.shape[0] != y_t.shape[0]:
                raise ValueError(f"batch mismatch: state {y_t.shape[0]} vs conditioning {x.shape[0]}")
            y_t = torch.cat([y_t, x], dim=1)
        return self.net(y_t, t)


def prior_forward(module: nn.Module, x: torch.Tensor | None) -> DiagGaussianField:
    """Evaluate a prior network; unconditional priors ignore (absent) input."""
    if isinstance(module, UnconditionalPrior):
        return module(x)
    if x is None:
        raise ValueError("conditional prior called without an input image")
    return module(x)


def flow_forward(module: FlowImageNetwork, y_t: torch.Tensor, t, x: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=y_t.dtype, device=y_t.device)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError("time must lie in [0, 1]")
    return module(y_t, t, x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def ema_update(shadow: dict[str, torch.Tensor], live: dict[str, torch.Tensor], rate: float) -> dict[str, torch.Tensor]:
    """shadow <- rate * shadow + (1 - rate) * live, elementwise, in place."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("EMA rate must lie in [0, 1)")
    for name, value in live.items():
        shadow[name].mul_(rate).add_(value.detach(), alpha=1.0 - rate)
    return shadow


class EmaTracker:
    """Shadow copy of a module's parameters updated once per step."""

    def __init__(self, module: nn.Module):
        self.shadow = {name: p.detach().clone() for name, p in module.named_parameters()}

    def update(self, module: nn.Module, rate: float) -> None:
        ema_update(self.shadow, dict(module.named_parameters()), rate)

    def copy_to(self, module: nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])

    def state_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.shadow)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    config: dict
    tensors: dict[str, torch.Tensor]
    ema_tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def _tensor_directory(tensors: dict[str, torch.Tensor], offset: int) -> tuple[list[dict], bytes, int]:
    entries, blobs = [], []
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        raw = data.tobytes()
        entries.append(
            {"name": name, "shape": list(data.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    return entries, b"".join(blobs), offset


def save_checkpoint(path: str, step: int, config: dict, tensors: dict[str, torch.Tensor], ema_tensors: dict[str, torch.Tensor] | None = None) -> None:
    live_dir, live_blob, offset = _tensor_directory(tensors, 0)
    ema_dir, ema_blob, _ = _tensor_directory(ema_tensors or {}, offset)
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "step": step,
            "config": config,
            "tensors": live_dir,
            "ema_tensors": ema_dir,
        },
        sort_keys=True,
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(live_blob)
        fh.write(ema_blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        payload = fh.read()

    def read_dir(entries):
        out = {}
        for entry in entries:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
            out[entry["name"]] = torch.from_numpy(arr)
        return out

    return Checkpoint(
        step=header["step"],
        config=header["config"],
        tensors=read_dir(header["tensors"]),
        ema_tensors=read_dir(header["ema_tensors"]),
    )
