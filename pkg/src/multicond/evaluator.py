"""Condition evaluator: a small vision-text transformer that ranks candidate
condition maps without seeing the source image.

Each condition map is patch-embedded into 16 tokens; one query token per
condition is appended after the instruction.  Queries bind to their condition
through a segment attention mask (a query sees its own condition's patches,
the instruction, and the other queries), and all slot-level embeddings are
shared across slots, so permuting the input conditions permutes the output
probabilities exactly.  Query hidden states feed three heads: vocabulary
logits, scalar ranking scores, and the resampler that produces fixed-shape
conditioning embeddings for the diffusion side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab
from .errors import ConfigurationError, ContractError, DomainError
from .scenes import CONDITION_KINDS, ConditionMap, NUM_SEG_CLASSES
from .torchbridge import condition_to_flat
from .vocab import COLOR_WORDS, TOKEN_TO_ID


@dataclass(frozen=True)
class EvaluatorConfig:
    resolution: int = 32
    patch_grid: int = 4  # 4x4 grid -> 16 patches per condition
    width: int = 128
    layers: int = 4
    heads: int = 4
    max_conditions: int = vocab.MAX_CONDITIONS
    max_seq: int = 256
    max_instruction: int = 32
    num_queries: int = 8  # resampler latents
    embed_dim: int = 64  # conditioning embedding width
    resampler_layers: int = 2
    vocab_size: int = vocab.VOCAB_SIZE

    @property
    def patches_per_condition(self) -> int:
        return self.patch_grid**2 + 1  # 4x4 grid plus one global-summary token

    @property
    def patch_size(self) -> int:
        if self.resolution % self.patch_grid != 0:
            raise ConfigurationError("resolution must be divisible by the patch grid")
        return self.resolution // self.patch_grid

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "patch_grid": self.patch_grid,
            "width": self.width,
            "layers": self.layers,
            "heads": self.heads,
            "max_conditions": self.max_conditions,
            "max_seq": self.max_seq,
            "max_instruction": self.max_instruction,
            "num_queries": self.num_queries,
            "embed_dim": self.embed_dim,
            "resampler_layers": self.resampler_layers,
            "vocab_size": self.vocab_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvaluatorConfig":
        return EvaluatorConfig(**{**EvaluatorConfig().to_dict(), **d})


@dataclass(frozen=True)
class EvaluatorInput:
    conditions: tuple[ConditionMap, ...]
    instruction_tokens: tuple[int, ...]  # fixed prefix + caption tokens


def make_evaluator_input(conditions, caption_tokens=()) -> EvaluatorInput:
    instruction = tuple(vocab.INSTRUCTION_PREFIX_IDS) + tuple(caption_tokens)
    return EvaluatorInput(conditions=tuple(conditions), instruction_tokens=instruction)


@dataclass
class EvaluatorOutput:
    p: torch.Tensor  # (B, N) softmax over conditions
    token_logits: torch.Tensor  # (B, N, V)
    hidden: torch.Tensor  # (B, N, width)
    embeddings: torch.Tensor  # (B, M, embed_dim) conditioning embeddings


class LoRALinear(nn.Module):
    """Frozen base linear plus a trainable low-rank update."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        if rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.down = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(rank))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scaling = scaling

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.down), self.up)


@dataclass(frozen=True)
class LowRankAdapterSpec:
    rank: int = 4
    targets: tuple[str, ...] = ("q", "v")
    scaling: float = 1.0


class AttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP with explicit q/k/v/out projections."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads != 0:
            raise ConfigurationError("width must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.norm1 = nn.LayerNorm(width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x, blocked: torch.Tensor | None = None):
        b, s, w = x.shape
        h = self.norm1(x)
        dh = w // self.heads

        def split(t):
            return t.reshape(b, s, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        if blocked is not None:
            att = att.masked_fill(blocked[None, None, :, :], float("-inf"))
        att = att.softmax(dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(b, s, w)
        x = x + self.out(ctx)
        return x + self.mlp(self.norm2(x))


class Resampler(nn.Module):
    """Fixed-count learned queries cross-attending to variable-length hidden
    states; output projections start at zero so the initial output equals the
    learned query vectors regardless of the inputs."""

    def __init__(self, in_width: int, embed_dim: int, num_queries: int, layers: int, heads: int = 4):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(num_queries, embed_dim) * 0.02)
        self.in_proj = nn.Linear(in_width, embed_dim)
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            attn = nn.MultiheadAttention(embed_dim, heads, batch_first=True, dropout=0.0)
            nn.init.zeros_(attn.out_proj.weight)
            nn.init.zeros_(attn.out_proj.bias)
            ff = nn.Sequential(
                nn.Linear(embed_dim, 2 * embed_dim), nn.GELU(), nn.Linear(2 * embed_dim, embed_dim)
            )
            nn.init.zeros_(ff[2].weight)
            nn.init.zeros_(ff[2].bias)
            self.blocks.append(
                nn.ModuleDict(
                    {"ln_q": nn.LayerNorm(embed_dim), "ln_kv": nn.LayerNorm(embed_dim),
                     "attn": attn, "ln_ff": nn.LayerNorm(embed_dim), "ff": ff}
                )
            )

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """(B, N, in_width) query-token states -> (B, M, embed_dim)."""
        if hidden.dim() != 3 or hidden.shape[1] < 1:
            raise ContractError("resampler needs at least one hidden state")
        kv = self.in_proj(hidden)
        lat = self.latents.unsqueeze(0).expand(hidden.shape[0], -1, -1)
        for blk in self.blocks:
            att, _ = blk["attn"](blk["ln_q"](lat), blk["ln_kv"](kv), blk["ln_kv"](kv),
                                 need_weights=False)
            lat = lat + att
            lat = lat + blk["ff"](blk["ln_ff"](lat))
        return lat


class EvaluatorModel(nn.Module):
    def __init__(self, cfg: EvaluatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or EvaluatorConfig()
        c = self.cfg
        ps = c.patch_size
        # patch features: raw values plus a 9-bin value histogram (for seg maps
        # this is the per-patch class histogram, making color content linear)
        self.patch_proj = nn.Linear(ps * ps + NUM_SEG_CLASSES, c.width)
        self.kind_emb = nn.Embedding(len(CONDITION_KINDS), c.width)
        self.patch_pos = nn.Parameter(torch.randn(c.patches_per_condition, c.width) * 0.02)
        self.cond_type = nn.Parameter(torch.randn(c.width) * 0.02)  # shared across slots
        self.token_emb = nn.Embedding(c.vocab_size, c.width)
        # per-kind embeddings of the 9 value bins; the seg bins for the 8
        # palette classes are weight-tied to the caption color-word embeddings
        # so content/word matching does not have to be rediscovered from data
        self.bin_emb = nn.ParameterDict(
            {k: nn.Parameter(torch.randn(NUM_SEG_CLASSES, c.width) * 0.02)
             for k in CONDITION_KINDS if k != "seg"}
        )
        self.seg_background_emb = nn.Parameter(torch.randn(c.width) * 0.02)
        self._color_token_ids = torch.tensor([TOKEN_TO_ID[w] for w in COLOR_WORDS])
        self.instr_pos = nn.Parameter(torch.randn(c.max_instruction, c.width) * 0.02)
        self.query_emb = nn.Parameter(torch.randn(c.width) * 0.02)  # shared across slots
        self.blocks = nn.ModuleList(AttentionBlock(c.width, c.heads) for _ in range(c.layers))
        self.final_norm = nn.LayerNorm(c.width)
        self.score_head = nn.Linear(c.width, 1)
        self.token_head = nn.Linear(c.width, c.vocab_size)
        self.resampler = Resampler(c.width, c.embed_dim, c.num_queries, c.resampler_layers)

    # --- input assembly -------------------------------------------------
    def _patch_tokens(self, cond: ConditionMap) -> torch.Tensor:
        c = self.cfg
        if cond.resolution != c.resolution:
            raise ContractError(
                f"condition resolution {cond.resolution} != evaluator resolution {c.resolution}"
            )
        flat = condition_to_flat(cond)
        g, ps = c.patch_grid, c.patch_size
        patches = flat.reshape(g, ps, g, ps).permute(0, 2, 1, 3).reshape(g * g, ps * ps)
        levels = (patches * (NUM_SEG_CLASSES - 1)).round().long().clamp(0, NUM_SEG_CLASSES - 1)
        hist = F.one_hot(levels, NUM_SEG_CLASSES).to(patches.dtype).mean(dim=1)
        feats = torch.cat([patches, hist], dim=1)
        # global-summary token: zero pixel block, whole-map histogram
        global_feat = torch.cat([torch.zeros_like(patches[:1]), hist.mean(dim=0, keepdim=True)],
                                dim=1)
        feats = torch.cat([feats, global_feat])
        tok = self.patch_proj(feats.to(self.patch_proj.weight.dtype))
        if cond.kind == "seg":
            bins = torch.cat([self.token_emb(self._color_token_ids),
                              self.seg_background_emb.unsqueeze(0)])
        else:
            bins = self.bin_emb[cond.kind]
        hist_all = torch.cat([hist, hist.mean(dim=0, keepdim=True)])
        tok = tok + hist_all.to(bins.dtype) @ bins
        tok = tok + self.kind_emb.weight[CONDITION_KINDS.index(cond.kind)]
        return tok + self.patch_pos + self.cond_type

    def _blocked_mask(self, n: int, instr_len: int) -> torch.Tensor:
        p = self.cfg.patches_per_condition
        s = n * p + instr_len + n
        blocked = torch.zeros(s, s, dtype=torch.bool)
        q0 = n * p + instr_len
        blocked[q0:, :] = True  # queries start blocked everywhere...
        blocked[q0:, n * p : s] = False  # ...except instruction and all queries
        for i in range(n):
            blocked[q0 + i, i * p : (i + 1) * p] = False  # ...and their own patches
        return blocked

    def forward(self, inputs: EvaluatorInput | list[EvaluatorInput]) -> EvaluatorOutput:
        single = isinstance(inputs, EvaluatorInput)
        batch_inputs = [inputs] if single else list(inputs)
        c = self.cfg
        n = len(batch_inputs[0].conditions)
        if n == 0:
            raise DomainError("need at least one condition")
        if n > c.max_conditions:
            raise ConfigurationError(f"{n} conditions exceed the maximum of {c.max_conditions}")
        if any(len(bi.conditions) != n for bi in batch_inputs):
            raise ContractError("all batch items must carry the same number of conditions")
        instr_len = max(len(bi.instruction_tokens) for bi in batch_inputs)
        if instr_len > c.max_instruction:
            raise ConfigurationError(f"instruction length {instr_len} > {c.max_instruction}")
        seq = n * c.patches_per_condition + instr_len + n
        if seq > c.max_seq:
            raise ConfigurationError(f"sequence length {seq} exceeds {c.max_seq}")

        rows = []
        for bi in batch_inputs:
            cond_tok = torch.cat([self._patch_tokens(cond) for cond in bi.conditions])
            ids = list(bi.instruction_tokens) + [vocab.PAD_ID] * (
                instr_len - len(bi.instruction_tokens)
            )
            instr_tok = self.token_emb(torch.tensor(ids, dtype=torch.long))
            instr_tok = instr_tok + self.instr_pos[:instr_len]
            query_tok = self.query_emb.unsqueeze(0).expand(n, -1)
            rows.append(torch.cat([cond_tok, instr_tok, query_tok]))
        x = torch.stack(rows)

        blocked = self._blocked_mask(n, instr_len)
        for block in self.blocks:
            x = block(x, blocked)
        x = self.final_norm(x)
        hidden = x[:, -n:, :]
        logits = self.score_head(hidden).squeeze(-1)
        return EvaluatorOutput(
            p=logits.softmax(dim=-1),
            token_logits=self.token_head(hidden),
            hidden=hidden,
            embeddings=self.resampler(hidden),
        )

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


def evaluator_forward(model: EvaluatorModel, inputs) -> EvaluatorOutput:
    return model(inputs)


def loss_token(output: EvaluatorOutput, n_conditions: int | None = None) -> torch.Tensor:
    """Mean NLL of each query position predicting its own appended vocab token."""
    logits = output.token_logits
    b, n, v = logits.shape
    if n_conditions is not None and n_conditions != n:
        raise ContractError(f"output carries {n} query positions, expected {n_conditions}")
    targets = torch.tensor([vocab.condition_token_id(i) for i in range(n)], dtype=torch.long)
    targets = targets.unsqueeze(0).expand(b, -1).reshape(-1)
    return F.cross_entropy(logits.reshape(b * n, v), targets)


def rank_targets(scores, temperature: float = 0.5) -> torch.Tensor:
    s = torch.as_tensor(scores, dtype=torch.float64)
    return (s / temperature).softmax(dim=-1)


def loss_rank(p: torch.Tensor, scores, temperature: float = 0.5) -> torch.Tensor:
    """Soft-target cross-entropy: targets are the controller scores passed
    through a tempered softmax; loss = -sum(c * log p)."""
    p = torch.as_tensor(p)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    if isinstance(scores, (list, tuple)) and scores and hasattr(scores[0], "score"):
        scores = [s.score for s in scores]
    c = rank_targets(scores, temperature).to(p.dtype)
    if c.dim() == 1:
        c = c.unsqueeze(0)
    if c.shape != p.shape:
        raise ContractError(f"scores shape {tuple(c.shape)} != p shape {tuple(p.shape)}")
    return -(c * torch.log(p.clamp_min(1e-12))).sum(dim=-1).mean()


def apply_lora(model: EvaluatorModel, spec: LowRankAdapterSpec) -> list[nn.Parameter]:
    """Wrap target attention projections with low-rank adapters and freeze the
    base transformer weights; returns the trainable adapter parameters."""
    name_map = {"q": "q", "k": "k", "v": "v", "out": "out"}
    for t in spec.targets:
        if t not in name_map:
            raise ConfigurationError(f"unknown LoRA target {t!r}")
    adapters: list[nn.Parameter] = []
    for block in model.blocks:
        for t in spec.targets:
            base = getattr(block, name_map[t])
            lora = LoRALinear(base, spec.rank, spec.scaling)
            setattr(block, name_map[t], lora)
            adapters += [lora.down, lora.up]
        for name, p in block.named_parameters():
            if "down" not in name and "up" not in name:
                p.requires_grad_(False)
    for module in (model.patch_proj, model.kind_emb, model.token_emb):
        for p in module.parameters():
            p.requires_grad_(False)
    return adapters
