"""Multi-control adapter: learnable-threshold selection gate, per-kind expert
encoders, and fusion blocks of parallel criss-cross attentions followed by
cross attention against the evaluator's conditioning embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, DomainError
from .scenes import CONDITION_KINDS, ConditionMap, NUM_SEG_CLASSES
from .torchbridge import condition_to_flat, condition_to_tensor
from .unet import ControlEmbedding, DenoiserConfig
from .vocab import MAX_CONDITIONS


@dataclass
class SelectionGate:
    theta: float | torch.Tensor = 0.5  # learnable threshold (adapter parameter)
    tau: float = 0.1  # softness temperature, fixed
    mode: str = "infer_hard"  # train_soft | infer_hard


@dataclass
class GateResult:
    weights: torch.Tensor  # (..., N); straight-through in train_soft mode
    soft: torch.Tensor  # (..., N) sigmoid((s - theta) / tau)
    mask: torch.Tensor  # (..., N) bool hard selection (with argmax fallback)
    selected_ids: list  # ids ordered by descending score (id tiebreak); list-of-lists if batched


def canonical_order(scores, ids=None) -> list[int]:
    """Ids sorted by descending score, ascending id on ties; ids default to positions."""
    s = [float(x) for x in np.asarray(scores, dtype=np.float64)]
    ids = list(range(len(s))) if ids is None else list(ids)
    return [i for i, _ in sorted(zip(ids, s), key=lambda pair: (-pair[1], pair[0]))]


def gate(scores, gate_cfg: SelectionGate) -> GateResult:
    """Threshold selection over condition scores.

    train_soft: forward pass uses the hard mask, backward uses the sigmoid
    soft weights (straight-through).  infer_hard: binary mask.  When no score
    clears the threshold the argmax is selected, so selection is never empty.
    """
    s = torch.as_tensor(scores, dtype=torch.get_default_dtype() if not isinstance(scores, torch.Tensor) else scores.dtype)
    if s.numel() == 0 or s.shape[-1] == 0:
        raise DomainError("gate needs at least one score")
    batched = s.dim() > 1
    theta = torch.as_tensor(gate_cfg.theta, dtype=s.dtype)
    mask = s >= theta
    none_selected = ~mask.any(dim=-1, keepdim=True)
    argmax_mask = F.one_hot(s.argmax(dim=-1), s.shape[-1]).bool()
    if not batched:
        argmax_mask = argmax_mask.reshape(s.shape)
    mask = torch.where(none_selected, argmax_mask, mask)
    soft = torch.sigmoid((s - theta) / gate_cfg.tau)
    if gate_cfg.mode == "train_soft":
        # parenthesized so the forward value is exactly the hard mask
        weights = mask.to(s.dtype).detach() + (soft - soft.detach())
    elif gate_cfg.mode == "infer_hard":
        weights = mask.to(s.dtype)
    else:
        raise ConfigurationError(f"unknown gate mode {gate_cfg.mode!r}")
    s_np = s.detach().cpu().numpy()
    m_np = mask.detach().cpu().numpy()
    if batched:
        selected = [
            [i for i in canonical_order(row_s) if row_m[i]] for row_s, row_m in zip(s_np, m_np)
        ]
    else:
        selected = [i for i in canonical_order(s_np) if m_np[i]]
    return GateResult(weights=weights, soft=soft, mask=mask, selected_ids=selected)


class ExpertBank(nn.Module):
    """Deterministic per-kind routing to kind-specific convolutional encoders
    producing H/2 x W/2 feature maps; a single shared expert when MoE is off."""

    def __init__(self, feat_dim: int = 64, use_moe: bool = True):
        super().__init__()
        self.use_moe = use_moe
        self.feat_dim = feat_dim

        def make_expert(in_ch):
            return nn.Sequential(
                nn.Conv2d(in_ch, feat_dim // 2, 3, padding=1), nn.SiLU(),
                nn.Conv2d(feat_dim // 2, feat_dim, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(feat_dim, feat_dim, 3, padding=1),
            )

        if use_moe:
            self.experts = nn.ModuleDict(
                {k: make_expert(NUM_SEG_CLASSES if k == "seg" else 1) for k in CONDITION_KINDS}
            )
        else:
            self.shared = make_expert(1)

    def encode(self, kind: str, canonical: torch.Tensor, flat: torch.Tensor) -> torch.Tensor:
        if kind not in CONDITION_KINDS:
            raise ContractError(f"unknown condition kind {kind!r}")
        if self.use_moe:
            return self.experts[kind](canonical)
        return self.shared(flat)


def expert_encode(bank: ExpertBank, cond: ConditionMap) -> torch.Tensor:
    """Route one condition map to its expert; returns (1, C, H/2, W/2)."""
    canonical = condition_to_tensor(cond).unsqueeze(0)
    flat = condition_to_flat(cond).unsqueeze(0).unsqueeze(0)
    return bank.encode(cond.kind, canonical, flat)


class CrissCrossAttention(nn.Module):
    """Each position attends over the H+W-1 positions sharing its row or
    column.  The output projection starts at zero, so the module is the
    identity at initialization (residual form)."""

    def __init__(self, channels: int):
        super().__init__()
        qk = max(1, channels // 8)
        self.q = nn.Conv2d(channels, qk, 1)
        self.k = nn.Conv2d(channels, qk, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        scale = q.shape[1] ** -0.5

        q_col = q.permute(0, 3, 2, 1)  # (B, W, H, Cq)
        k_col = k.permute(0, 3, 1, 2)  # (B, W, Cq, H)
        e_col = (q_col @ k_col) * scale  # (B, W, Hq, Hk)
        e_col = e_col.permute(0, 2, 1, 3)  # (B, Hq, W, Hk)
        eye = torch.eye(h, dtype=torch.bool, device=x.device)
        e_col = e_col.masked_fill(eye[:, None, :][None], float("-inf"))  # self counted once

        q_row = q.permute(0, 2, 3, 1)  # (B, H, W, Cq)
        k_row = k.permute(0, 2, 1, 3)  # (B, H, Cq, W)
        e_row = (q_row @ k_row) * scale  # (B, H, Wq, Wk)

        att = torch.cat([e_col, e_row], dim=-1).softmax(dim=-1)
        a_col = att[..., :h].permute(0, 2, 1, 3)  # (B, W, Hq, Hk)
        a_row = att[..., h:]  # (B, H, Wq, Wk)

        v_col = v.permute(0, 3, 2, 1)  # (B, W, H, C)
        o_col = (a_col @ v_col).permute(0, 3, 2, 1)  # (B, C, H, W)
        v_row = v.permute(0, 2, 3, 1)  # (B, H, W, C)
        o_row = (a_row @ v_row).permute(0, 3, 1, 2)  # (B, C, H, W)
        return x + self.out(o_col + o_row)


def criss_cross_attend(module: CrissCrossAttention, x: torch.Tensor) -> torch.Tensor:
    return module(x)


class FusionBlock(nn.Module):
    """n parallel criss-cross units (shared parameters), zero-padded channel
    concat over max slots, 1x1 reprojection, then cross attention whose keys
    and values are the evaluator's conditioning embeddings."""

    def __init__(self, feat_dim: int, n_max: int, embed_dim: int, heads: int = 4,
                 use_criss_cross: bool = True):
        super().__init__()
        self.n_max = n_max
        self.use_criss_cross = use_criss_cross
        self.cc = CrissCrossAttention(feat_dim) if use_criss_cross else None
        self.reproj = nn.Conv2d(n_max * feat_dim, feat_dim, 1)
        self.q_norm = nn.LayerNorm(feat_dim)
        self.cross = nn.MultiheadAttention(
            feat_dim, heads, kdim=embed_dim, vdim=embed_dim, batch_first=True, dropout=0.0
        )

    def forward(self, streams: torch.Tensor, cond_embed: torch.Tensor):
        """streams: (B, n, C, H, W) gated features in canonical order."""
        b, n, c, h, w = streams.shape
        if self.use_criss_cross:
            streams = self.cc(streams.reshape(b * n, c, h, w)).reshape(b, n, c, h, w)
        stacked = streams.reshape(b, n * c, h, w)
        if n < self.n_max:
            pad = torch.zeros(b, (self.n_max - n) * c, h, w, dtype=streams.dtype,
                              device=streams.device)
            stacked = torch.cat([stacked, pad], dim=1)
        fused = self.reproj(stacked)
        q = self.q_norm(fused.flatten(2).transpose(1, 2))
        att, _ = self.cross(q, cond_embed, cond_embed, need_weights=False)
        fused = fused + att.transpose(1, 2).reshape(b, c, h, w)
        return streams, fused


@dataclass(frozen=True)
class AdapterConfig:
    feat_dim: int = 64
    blocks: int = 2
    n_max: int = MAX_CONDITIONS
    embed_dim: int = 64
    heads: int = 4
    tau: float = 0.1
    theta_init: float = 0.5
    use_moe: bool = True
    use_criss_cross: bool = True

    def to_dict(self) -> dict:
        return {
            "feat_dim": self.feat_dim, "blocks": self.blocks, "n_max": self.n_max,
            "embed_dim": self.embed_dim, "heads": self.heads, "tau": self.tau,
            "theta_init": self.theta_init, "use_moe": self.use_moe,
            "use_criss_cross": self.use_criss_cross,
        }

    @staticmethod
    def from_dict(d: dict) -> "AdapterConfig":
        return AdapterConfig(**{**AdapterConfig().to_dict(), **d})


class MultiControlAdapter(nn.Module):
    """Fuses gated expert features of the selected conditions into per-scale
    control feature maps for the denoiser's control branch."""

    def __init__(self, cfg: AdapterConfig, denoiser_cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser_cfg = denoiser_cfg
        self.theta = nn.Parameter(torch.tensor(float(cfg.theta_init)))
        self.experts = ExpertBank(cfg.feat_dim, use_moe=cfg.use_moe)
        self.blocks = nn.ModuleList(
            FusionBlock(cfg.feat_dim, cfg.n_max, cfg.embed_dim, cfg.heads, cfg.use_criss_cross)
            for _ in range(cfg.blocks)
        )
        heads = []
        base_res = denoiser_cfg.resolution // 2  # expert features live at H/2
        for ch, res in zip(denoiser_cfg.channels, denoiser_cfg.scales):
            if res == base_res * 2:
                head = nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(cfg.feat_dim, ch, 3, padding=1),
                )
            elif res == base_res:
                head = nn.Conv2d(cfg.feat_dim, ch, 3, padding=1)
            else:
                stride = base_res // res
                head = nn.Conv2d(cfg.feat_dim, ch, 3, stride=stride, padding=1)
            heads.append(head)
        self.heads = nn.ModuleList(heads)

    def selection_gate(self, mode: str) -> SelectionGate:
        return SelectionGate(theta=self.theta, tau=self.cfg.tau, mode=mode)

    def fuse(self, streams: torch.Tensor, cond_embed: torch.Tensor) -> ControlEmbedding:
        fused_total = None
        for block in self.blocks:
            streams, fused = block(streams, cond_embed)
            fused_total = fused if fused_total is None else fused_total + fused
        return ControlEmbedding(feats=tuple(head(fused_total) for head in self.heads))

    def forward_batch(
        self,
        columns: list[tuple[str, torch.Tensor, torch.Tensor]],  # (kind, canonical, flat) per column
        weights: torch.Tensor,  # (B, N) gate weights
        scores: np.ndarray,  # (B, N) detached scores for canonical ordering
        cond_embed: torch.Tensor,  # (B, M, embed_dim)
    ) -> ControlEmbedding:
        if len(columns) == 0:
            raise DomainError("adapter needs at least one condition column")
        if len(columns) > self.cfg.n_max:
            raise ContractError(f"{len(columns)} conditions exceed n_max {self.cfg.n_max}")
        feats = [self.experts.encode(kind, canonical, flat) for kind, canonical, flat in columns]
        stacked = torch.stack(feats, dim=1)  # (B, N, C, H', W')
        stacked = stacked * weights[:, :, None, None, None]
        order = np.stack([canonical_order(row) for row in scores])  # (B, N)
        idx = torch.as_tensor(order, dtype=torch.long)
        gathered = stacked.gather(
            1, idx[:, :, None, None, None].expand(-1, -1, *stacked.shape[2:])
        )
        return self.fuse(gathered, cond_embed)

    def forward_selected(
        self, selected: list[tuple[ConditionMap, float]], cond_embed: torch.Tensor
    ) -> ControlEmbedding:
        """Single-sample path: conditions already in canonical order."""
        if len(selected) == 0:
            raise DomainError("empty selection (the gate fallback should prevent this)")
        if len(selected) > self.cfg.n_max:
            raise ContractError(f"selection exceeds n_max {self.cfg.n_max}")
        feats = []
        for cond, weight in selected:
            f = expert_encode(self.experts, cond)
            feats.append(f * torch.as_tensor(weight, dtype=f.dtype))
        streams = torch.stack(feats, dim=1)
        return self.fuse(streams, cond_embed)


def adapter_forward(
    adapter: MultiControlAdapter,
    selected: list[tuple[ConditionMap, float]],
    cond_embed: torch.Tensor,
) -> ControlEmbedding:
    return adapter.forward_selected(selected, cond_embed)


@dataclass(frozen=True)
class SelectionRecord:
    scene_id: int
    theta: float
    scores: tuple[float, ...]
    selected_ids: tuple[int, ...]
    weights: tuple[float, ...]


def write_selection_records(path, records: list[SelectionRecord]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "scene_id": r.scene_id,
                        "theta": r.theta,
                        "scores": list(r.scores),
                        "selected_ids": list(r.selected_ids),
                        "weights": list(r.weights),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
