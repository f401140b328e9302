"""Generation with dynamic condition selection, and the evaluation loop used
by training validation and the ablation runners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adapter import SelectionRecord, canonical_order, gate
from .controller import condition_loss
from .diffusion import ddim_sample
from .errors import ConfigurationError
from .evaluator import make_evaluator_input
from .metrics import ssim as ssim_metric
from .scenes import ConditionMap, alignment_check, extract_condition, luma_of
from .torchbridge import tensor_to_image
from .unet import ControlEmbedding, pad_captions


def select_conditions(models, conditions: list[ConditionMap], caption_tokens, selection):
    """Rank conditions with the frozen evaluator and pick a subset.

    selection: "adaptive" (learnable threshold, argmax fallback), "all", or
    ("fixed", k) for the top-k by evaluator probability.
    """
    with torch.no_grad():
        out = models.evaluator(make_evaluator_input(conditions, caption_tokens))
    p = out.p[0]
    order = canonical_order(p.numpy())
    if selection == "adaptive":
        res = gate(p, models.adapter.selection_gate("infer_hard"))
        chosen = res.selected_ids
    elif selection == "all":
        chosen = order
    elif isinstance(selection, tuple) and selection[0] == "fixed":
        k = selection[1]
        if not 1 <= k <= len(conditions):
            raise ConfigurationError(f"fixed selection k={k} outside 1..{len(conditions)}")
        chosen = order[:k]
    else:
        raise ConfigurationError(f"unknown selection mode {selection!r}")
    selected = [(conditions[i], 1.0) for i in chosen]
    record = SelectionRecord(
        scene_id=-1,
        theta=float(models.adapter.theta),
        scores=tuple(float(x) for x in p),
        selected_ids=tuple(chosen),
        weights=tuple(1.0 if i in chosen else 0.0 for i in range(len(conditions))),
    )
    return selected, out.embeddings, record


def generate_with_selection(
    models,
    ds,
    idxs,
    cond_sets: list[list[ConditionMap]],
    steps: int,
    seed: int,
    selection="adaptive",
) -> tuple[list[np.ndarray], list[SelectionRecord]]:
    """Select conditions per scene, fuse controls, and run one batched DDIM pass."""
    if models.control_model is None or models.adapter is None:
        raise ConfigurationError("generation requires stage-2 models")
    feats_per_scene = []
    records = []
    captions = []
    for i, conds in zip(idxs, cond_sets):
        bundle = ds[i]
        selected, embeddings, record = select_conditions(
            models, conds, bundle.scene.caption_tokens, selection
        )
        with torch.no_grad():
            controls = models.adapter.forward_selected(selected, embeddings)
        feats_per_scene.append(controls.feats)
        records.append(
            SelectionRecord(
                scene_id=bundle.scene_id, theta=record.theta, scores=record.scores,
                selected_ids=record.selected_ids, weights=record.weights,
            )
        )
        captions.append(bundle.scene.caption_tokens)
    batched = ControlEmbedding(
        feats=tuple(torch.cat([f[s] for f in feats_per_scene]) for s in range(len(feats_per_scene[0])))
    )
    with torch.no_grad():
        ctx = models.control_text(pad_captions(captions))
    res = models.system.resolution
    images = ddim_sample(
        models.control_model, models.sched, ctx, controls=batched, steps=steps, seed=seed,
        shape=(len(idxs), 3, res, res),
    )
    return [tensor_to_image(images[k]) for k in range(len(idxs))], records


@dataclass
class GenerationEval:
    consistency: dict[str, float]  # per kind, 1 - condition_loss vs clean ground truth
    consistency_mean: float
    alignment: float
    ssim: float


def evaluate_generation(models, ds, idxs, cond_sets, steps, seed, selection="adaptive",
                        metric_kinds=None):
    """Generate for each scene and measure consistency/alignment/SSIM against
    the clean ground truth; metric_kinds defaults to the model's condition set."""
    kinds = metric_kinds or models.system.condition_kinds
    images, records = generate_with_selection(models, ds, idxs, cond_sets, steps, seed, selection)
    loss_acc: dict[str, list[float]] = {k: [] for k in kinds}
    align = []
    ssim_vals = []
    for row, i in enumerate(idxs):
        img = images[row]
        for kind in kinds:
            ext = extract_condition(img, kind)
            loss_acc[kind].append(condition_loss(ds[i].conditions[kind], ext))
        align.append(alignment_check(ds[i].scene, img))
        ssim_vals.append(ssim_metric(luma_of(img), luma_of(ds[i].image)))
    consistency = {k: 1.0 - float(np.mean(v)) for k, v in loss_acc.items()}
    return GenerationEval(
        consistency=consistency,
        consistency_mean=float(np.mean(list(consistency.values()))),
        alignment=float(np.mean(align)),
        ssim=float(np.mean(ssim_vals)),
    ), images, records
