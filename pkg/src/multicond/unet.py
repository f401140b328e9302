"""Small three-scale denoiser with text cross-attention and a ControlNet-style
control branch entering through zero-initialized 1x1 projections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .vocab import VOCAB_SIZE, PAD_ID


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    ctx_dim: int = 64
    temb_dim: int = 128
    attn_heads: int = 2

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(self.resolution // (2**i) for i in range(len(self.channels)))

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "ctx_dim": self.ctx_dim,
            "temb_dim": self.temb_dim,
            "attn_heads": self.attn_heads,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        merged = {**DenoiserConfig().to_dict(), **d}
        merged["channels"] = tuple(merged["channels"])
        return DenoiserConfig(**merged)


@dataclass
class ControlEmbedding:
    """Per-scale feature maps injected into the denoiser's control branch."""

    feats: tuple[torch.Tensor, ...]

    def validate_for(self, cfg: DenoiserConfig, batch: int) -> None:
        if len(self.feats) != len(cfg.channels):
            raise ContractError(f"expected {len(cfg.channels)} scales, got {len(self.feats)}")
        for f, ch, res in zip(self.feats, cfg.channels, cfg.scales):
            want = (batch, ch, res, res)
            if tuple(f.shape) != want:
                raise ContractError(f"control feature shape {tuple(f.shape)} != {want}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    freqs = freqs.to(t.device).to(torch.float32)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if ch % g == 0)
    return nn.GroupNorm(num_groups=groups, num_channels=ch)


class ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, temb_dim):
        super().__init__()
        self.norm1 = _norm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, ch_out)
        self.norm2 = _norm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialCrossAttention(nn.Module):
    """Flattened-spatial queries attending to a context token sequence."""

    def __init__(self, ch, ctx_dim, heads):
        super().__init__()
        self.norm = _norm(ch)
        self.attn = nn.MultiheadAttention(
            ch, heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True, dropout=0.0
        )

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, ctx, ctx, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    """Shared topology for the main encoder and the control branch clone."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chs = cfg.channels
        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, ch in enumerate(chs):
            self.blocks.append(ResBlock(ch, ch, cfg.temb_dim))
            self.attns.append(SpatialCrossAttention(ch, cfg.ctx_dim, cfg.attn_heads))
            if i + 1 < len(chs):
                self.downs.append(nn.Conv2d(ch, chs[i + 1], 3, stride=2, padding=1))

    def forward(self, x, temb, ctx, extra: ControlEmbedding | None = None):
        h = self.stem(x)
        feats = []
        for i, (block, attn) in enumerate(zip(self.blocks, self.attns)):
            if extra is not None:
                h = h + extra.feats[i]
            h = attn(block(h, temb), ctx)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chs = cfg.channels
        self.mid = ResBlock(chs[-1], chs[-1], cfg.temb_dim)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(chs) - 1, 0, -1):
            self.ups.append(nn.Conv2d(chs[i], chs[i - 1], 3, padding=1))
            self.blocks.append(ResBlock(2 * chs[i - 1], chs[i - 1], cfg.temb_dim))
        self.out_norm = _norm(chs[0])
        self.out_conv = nn.Conv2d(chs[0], cfg.in_channels, 3, padding=1)

    def forward(self, feats, temb):
        h = self.mid(feats[-1], temb)
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


class ControlInjector(nn.Module):
    """Zero-initialized 1x1 projections adding control-branch features per scale."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        self.projs = nn.ModuleList()
        for ch in channels:
            proj = nn.Conv2d(ch, ch, 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.projs.append(proj)

    def forward(self, branch_feats, encoder_feats):
        if len(branch_feats) != len(encoder_feats):
            raise ContractError("scale count mismatch between branch and encoder features")
        out = []
        for proj, bf, ef in zip(self.projs, branch_feats, encoder_feats):
            if bf.shape != ef.shape:
                raise ContractError(f"feature shape mismatch {tuple(bf.shape)} vs {tuple(ef.shape)}")
            out.append(ef + proj(bf))
        return out


def control_inject(injector: ControlInjector, branch_feats, encoder_feats):
    """Additive zero-initialized injection: encoder_feats + proj(branch_feats)."""
    return injector(branch_feats, encoder_feats)


class TextEncoder(nn.Module):
    """Token embedding + one self-attention layer producing the cross-attn context."""

    def __init__(self, ctx_dim=64, vocab_size=VOCAB_SIZE, max_len=32):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, ctx_dim)
        self.pos = nn.Parameter(torch.zeros(max_len, ctx_dim))
        self.layer = nn.TransformerEncoderLayer(
            ctx_dim, nhead=4, dim_feedforward=2 * ctx_dim, dropout=0.0, batch_first=True
        )
        self.max_len = max_len

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[1] > self.max_len:
            raise ContractError(f"caption length {token_ids.shape[1]} > {self.max_len}")
        h = self.embed(token_ids) + self.pos[: token_ids.shape[1]]
        return self.layer(h)


def pad_captions(captions: list[tuple[int, ...]], max_len: int = 32) -> torch.Tensor:
    out = torch.full((len(captions), max_len), PAD_ID, dtype=torch.long)
    for i, cap in enumerate(captions):
        ids = list(cap)[:max_len]
        out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


class Denoiser(nn.Module):
    """Epsilon-prediction model; with controls absent, or the injector at its
    zero init, the output equals the uncontrolled model's output exactly."""

    def __init__(self, cfg: DenoiserConfig, with_control_branch: bool = False):
        super().__init__()
        self.cfg = cfg
        self.temb = nn.Sequential(
            nn.Linear(cfg.temb_dim, cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim)
        )
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.control_branch = Encoder(cfg) if with_control_branch else None
        self.injector = ControlInjector(cfg.channels) if with_control_branch else None

    def attach_control_branch(self, clone_encoder: bool = True) -> None:
        """Add a fresh control branch; optionally clone main-encoder weights."""
        self.control_branch = Encoder(self.cfg)
        if clone_encoder:
            self.control_branch.load_state_dict(self.encoder.state_dict())
        self.injector = ControlInjector(self.cfg.channels)

    def forward(self, x, t, ctx, controls: ControlEmbedding | None = None):
        if x.shape[-1] != x.shape[-2]:
            raise ContractError("denoiser expects square inputs")
        dtype = self.temb[0].weight.dtype
        temb = self.temb(
            timestep_embedding(torch.as_tensor(t).reshape(-1), self.cfg.temb_dim).to(dtype)
        )
        feats = self.encoder(x, temb, ctx)
        if controls is not None:
            if self.control_branch is None:
                raise ContractError("model has no control branch but controls were given")
            controls.validate_for(self.cfg, x.shape[0])
            branch_feats = self.control_branch(x, temb, ctx, extra=controls)
            feats = self.injector(branch_feats, feats)
        return self.decoder(feats, temb)


class ConditionEncoder(nn.Module):
    """Plain convolutional single-condition encoder for the pre-trained
    single-control generator: one condition map -> per-scale control features."""

    def __init__(self, cfg: DenoiserConfig, in_channels: int):
        super().__init__()
        chs = cfg.channels
        self.stem = nn.Conv2d(in_channels, chs[0], 3, padding=1)
        self.stages = nn.ModuleList()
        for i in range(len(chs)):
            layers = [nn.Conv2d(chs[i], chs[i], 3, padding=1), nn.SiLU()]
            self.stages.append(nn.Sequential(*layers))
        self.downs = nn.ModuleList(
            nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(len(chs) - 1)
        )

    def forward(self, cond: torch.Tensor) -> ControlEmbedding:
        h = self.stem(cond)
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return ControlEmbedding(feats=tuple(feats))


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
