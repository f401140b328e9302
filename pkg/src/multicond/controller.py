"""Double-cycle controller: per-condition cycle-consistency loss, reverse
image-consistency loss, and the combined score used to supervise the
condition evaluator.

Scoring runs the pre-trained single-condition generator once per condition on
the same disturbed image, re-extracts the condition from the single-step clean
estimate, and combines condition consistency with embedding similarity to the
source image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .diffusion import NoiseSchedule, q_sample, scale_to_model, unscale_from_model, x0_estimate
from .errors import ContractError, DomainError
from .scenes import CONDITION_KINDS, ConditionMap, NUM_SEG_CLASSES, extract_condition
from .softlosses import soft_condition_loss
from .torchbridge import condition_to_flat, image_to_tensor, tensor_to_image
from .unet import ControlEmbedding, pad_captions

DEFAULT_SCORE_WEIGHTS = (0.5, 0.5)  # (condition weight, image weight)
T_FRACTION_RANGE = (0.3, 0.7)  # timestep band for the single-step estimate


@dataclass(frozen=True)
class ControllerScore:
    condition_id: int
    kind: str
    l_cond: float
    l_img: float
    score: float


@dataclass(frozen=True)
class ControllerSample:
    image: np.ndarray  # H x W x 3 in [0,1]
    caption_tokens: tuple[int, ...]
    conditions: list[ConditionMap]


class ImageAutoencoder(nn.Module):
    """Reconstruction autoencoder whose unit-normalized bottleneck plays the
    role of the frozen image-embedding model in the reverse consistency loss."""

    def __init__(self, resolution: int = 32, embed_dim: int = 64):
        super().__init__()
        self.resolution = resolution
        self.embed_dim = embed_dim
        spatial = resolution // 8
        self.enc = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(64 * spatial * spatial, embed_dim),
        )
        self.dec_lin = nn.Linear(embed_dim, 64 * spatial * spatial)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(32, 3, 4, stride=2, padding=1),
        )
        self._spatial = spatial

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) [0,1] images -> (B,D) unit-normalized embeddings."""
        h = self.enc(images)
        return F.normalize(h, dim=-1, eps=1e-8)

    def decode(self, emb: torch.Tensor) -> torch.Tensor:
        h = self.dec_lin(emb).reshape(-1, 64, self._spatial, self._spatial)
        return torch.sigmoid(self.dec(h))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))


def condition_loss(c_in: ConditionMap, c_hat: ConditionMap, kind: str | None = None) -> float:
    """Exact per-kind consistency loss in [0,1] between two condition maps."""
    if kind is None:
        kind = c_in.kind
    if c_in.kind != c_hat.kind or c_in.kind != kind:
        raise ContractError(f"kind mismatch: {c_in.kind!r} vs {c_hat.kind!r} (want {kind!r})")
    if c_in.data.shape != c_hat.data.shape:
        raise ContractError("condition map resolution mismatch")
    if kind == "edge":
        return 1.0 - metrics.f1_edge(c_hat.data, c_in.data)
    if kind == "softedge":
        return float(np.clip(1.0 - metrics.ssim(c_in.data, c_hat.data), 0.0, 1.0))
    if kind == "seg":
        return 1.0 - metrics.miou(c_hat.data, c_in.data, NUM_SEG_CLASSES)
    if kind == "luma":
        return metrics.rmse(c_in.data, c_hat.data)
    raise ContractError(f"unknown condition kind {kind!r}")


def image_loss(e_src, e_gen):
    """1 - cosine similarity between two embeddings; tensors stay on the graph."""
    a = torch.as_tensor(e_src)
    b = torch.as_tensor(e_gen)
    na = a.norm()
    nb = b.norm()
    if float(na) == 0.0 or float(nb) == 0.0:
        raise DomainError("image embeddings must be nonzero")
    val = 1.0 - (a * b).sum() / (na * nb)
    if isinstance(e_src, torch.Tensor) or isinstance(e_gen, torch.Tensor):
        return val
    return float(val)


def combine_scores(l_cond, l_img, weights=DEFAULT_SCORE_WEIGHTS):
    """Combined controller score: 1 - w_c * l_cond - (w_i / 2) * l_img."""
    w_c, w_i = weights
    if not isinstance(l_cond, torch.Tensor) and not isinstance(l_img, torch.Tensor):
        if not 0.0 <= l_cond <= 1.0:
            raise DomainError(f"l_cond {l_cond} outside [0, 1]")
        if not 0.0 <= l_img <= 2.0:
            raise DomainError(f"l_img {l_img} outside [0, 2]")
    return 1.0 - w_c * l_cond - (w_i / 2.0) * l_img


@dataclass
class GeneratorBundle:
    """Single-condition controlled generator produced by stage-0 training."""

    denoiser: nn.Module  # Denoiser with control branch
    cond_encoder: nn.Module  # ConditionEncoder over the unified 5-channel input
    text_encoder: nn.Module
    stage0_trained: bool = False


def stage0_condition_input(cond: ConditionMap) -> torch.Tensor:
    """Unified (5,H,W) encoding: flat value plane + kind one-hot planes."""
    flat = condition_to_flat(cond)
    planes = torch.zeros(1 + len(CONDITION_KINDS), *flat.shape)
    planes[0] = flat
    planes[1 + CONDITION_KINDS.index(cond.kind)] = 1.0
    return planes


def soft_gt_tensor(cond: ConditionMap) -> torch.Tensor:
    if cond.kind == "seg":
        return torch.from_numpy(np.ascontiguousarray(cond.data)).long()
    return torch.from_numpy(np.ascontiguousarray(cond.data)).float()


def sample_controller_t(sched: NoiseSchedule, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    lo = int(T_FRACTION_RANGE[0] * sched.T)
    hi = int(T_FRACTION_RANGE[1] * sched.T)
    return rng.integers(lo, hi + 1, size=n)


@dataclass
class ControllerPassResult:
    """Differentiable pass over a batch: loss tensors plus detached exact values."""

    l_cond: torch.Tensor  # (B, N) surrogate condition losses (on the graph)
    l_img: torch.Tensor  # (B, N) embedding losses (on the graph)
    score: torch.Tensor  # (B, N) combined scores (on the graph)
    exact_l_cond: np.ndarray  # (B, N) exact metric-based condition losses
    exact_l_img: np.ndarray  # (B, N) embedding losses on clipped estimates
    exact_scores: np.ndarray  # (B, N) combined scores from the exact components


def _generator_x0(bundle, x_t, t_rep, ctx_rep, cond_inputs, sched):
    controls = bundle.cond_encoder(cond_inputs)
    eps_pred = bundle.denoiser(x_t, t_rep, ctx_rep, controls)
    return x0_estimate(x_t, eps_pred, t_rep, sched)


def controller_pass(
    bundle: GeneratorBundle,
    images: torch.Tensor,  # (B,3,H,W) in [0,1]
    captions: torch.Tensor,  # (B,L) token ids
    condition_lists: list[list[ConditionMap]],
    sched: NoiseSchedule,
    image_encoder: ImageAutoencoder,
    t_vec: torch.Tensor,  # (B,) timesteps shared across each sample's conditions
    eps: torch.Tensor,  # (B,3,H,W) noise shared across each sample's conditions
    differentiable: bool = True,
    weights=DEFAULT_SCORE_WEIGHTS,
) -> ControllerPassResult:
    batch = images.shape[0]
    n = len(condition_lists[0])
    if n == 0:
        raise DomainError("need at least one condition per sample")
    if any(len(cl) != n for cl in condition_lists):
        raise ContractError("all samples must carry the same number of conditions")
    kinds = [cl_i.kind for cl_i in condition_lists[0]]
    for cl in condition_lists:
        if [c.kind for c in cl] != kinds:
            raise ContractError("condition kinds must agree column-wise across the batch")

    x0m = scale_to_model(images)
    x_t = q_sample(x0m, t_vec, eps, sched)
    x_t_rep = x_t.repeat_interleave(n, dim=0)
    t_rep = t_vec.repeat_interleave(n)
    ctx = bundle.text_encoder(captions)
    ctx_rep = ctx.repeat_interleave(n, dim=0)
    model_dtype = next(bundle.denoiser.parameters()).dtype
    cond_inputs = torch.stack(
        [stage0_condition_input(c) for cl in condition_lists for c in cl]
    ).to(model_dtype)

    grad_ctx = torch.enable_grad() if differentiable else torch.no_grad()
    with grad_ctx:
        x0_hat = _generator_x0(bundle, x_t_rep, t_rep, ctx_rep, cond_inputs, sched)
        img01 = unscale_from_model(x0_hat)  # unclipped: gradients stay alive
        e_src = image_encoder.encode(images).repeat_interleave(n, dim=0)
        e_gen = image_encoder.encode(img01)
        cos = (e_src * e_gen).sum(dim=1) / (
            e_src.norm(dim=1) * e_gen.norm(dim=1).clamp_min(1e-8)
        )
        l_img = (1.0 - cos).reshape(batch, n)
        l_cond_cols = []
        for i, kind in enumerate(kinds):
            rows = torch.arange(batch) * n + i
            gt = torch.stack([soft_gt_tensor(cl[i]) for cl in condition_lists])
            l_cond_cols.append(soft_condition_loss(kind, img01[rows], gt))
        l_cond = torch.stack(l_cond_cols, dim=1)
        score = combine_scores(l_cond, l_img, weights)

    # exact-path components on the same generator outputs (detached)
    exact_lc = np.zeros((batch, n))
    exact_li = np.zeros((batch, n))
    img_clipped = img01.detach().clamp(0.0, 1.0)
    with torch.no_grad():
        e_gen_x = image_encoder.encode(img_clipped)
        cos_x = (e_src.detach() * e_gen_x).sum(dim=1)
    for b in range(batch):
        for i in range(n):
            c_in = condition_lists[b][i]
            img_np = tensor_to_image(img_clipped[b * n + i])
            exact_lc[b, i] = condition_loss(c_in, extract_condition(img_np, c_in.kind))
            exact_li[b, i] = float(np.clip(1.0 - float(cos_x[b * n + i]), 0.0, 2.0))
    w_c, w_i = weights
    exact_scores = 1.0 - w_c * exact_lc - (w_i / 2.0) * exact_li
    return ControllerPassResult(
        l_cond=l_cond,
        l_img=l_img,
        score=score,
        exact_l_cond=exact_lc,
        exact_l_img=exact_li,
        exact_scores=exact_scores,
    )


def score_conditions(
    bundle: GeneratorBundle,
    sample: ControllerSample,
    sched: NoiseSchedule,
    image_encoder: ImageAutoencoder,
    t: int | None = None,
    seed: int = 0,
    weights=DEFAULT_SCORE_WEIGHTS,
) -> list[ControllerScore]:
    """Exact controller scores for one sample's conditions.

    The disturbance (t, noise) is drawn once and shared by every condition, so
    identical conditions score identically and permutations commute.
    """
    if len(sample.conditions) == 0:
        raise DomainError("need at least one condition")
    if not bundle.stage0_trained:
        warnings.warn("generator lacks stage-0 training; scores are defined but weak",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    if t is None:
        t = int(sample_controller_t(sched, rng)[0])
    gen = torch.Generator().manual_seed(seed)
    n = len(sample.conditions)
    images = image_to_tensor(sample.image).unsqueeze(0)
    eps = torch.randn(images.shape, generator=gen)
    captions = pad_captions([sample.caption_tokens])
    result = controller_pass(
        bundle,
        images,
        captions,
        [list(sample.conditions)],
        sched,
        image_encoder,
        t_vec=torch.tensor([t]),
        eps=eps,
        differentiable=False,
        weights=weights,
    )
    return [
        ControllerScore(
            condition_id=i,
            kind=cond.kind,
            l_cond=float(result.exact_l_cond[0, i]),
            l_img=float(result.exact_l_img[0, i]),
            score=float(result.exact_scores[0, i]),
        )
        for i, cond in enumerate(sample.conditions)
    ]


def write_score_records(path, scene_id: int, scores: list[ControllerScore]) -> None:
    """Append per-condition controller scores as line-delimited records."""
    import json

    with open(path, "a") as fh:
        for s in scores:
            fh.write(
                json.dumps(
                    {
                        "scene_id": scene_id,
                        "condition_id": s.condition_id,
                        "kind": s.kind,
                        "l_cond": s.l_cond,
                        "l_img": s.l_img,
                        "score": s.score,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
