"""Three-stage training orchestration.

Stage 0 pre-trains the single-condition generator and the image autoencoder
used by the controller's reverse-consistency loss.  Stage 1 jointly optimizes
the condition evaluator (token + ranking losses) and, when the joint toggle is
on, reward-tunes the generator through the differentiable cycle losses.
Stage 2 freezes the evaluator and trains the multi-control diffusion model
(adapter + control branch + denoiser) with the plain noise-prediction loss.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import vocab
from .adapter import AdapterConfig, MultiControlAdapter, gate
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .controller import (
    ControllerSample,
    GeneratorBundle,
    ImageAutoencoder,
    controller_pass,
    sample_controller_t,
    score_conditions,
)
from .dataset import (
    CorruptionPolicy,
    DatasetSplits,
    SceneDataset,
    load_dataset,
    make_condition_set,
    split_dataset,
)
from .diffusion import NoiseSchedule, make_schedule, q_sample, scale_to_model
from .errors import ConfigurationError, ContractError, PreconditionError, TrainingDiverged
from .evaluator import EvaluatorConfig, EvaluatorModel, loss_rank, loss_token, make_evaluator_input
from .metrics import spearman
from .scenes import CONDITION_KINDS, ConditionMap, extract_condition
from .controller import condition_loss, stage0_condition_input
from .torchbridge import batch_images, condition_to_flat, condition_to_tensor
from .unet import ConditionEncoder, Denoiser, DenoiserConfig, TextEncoder, pad_captions

STAGE_DEFAULT_LR = {0: 2e-4, 1: 2e-4, 2: 1e-4}
STAGE_DEFAULT_STEPS = {0: 3000, 1: 2000, 2: 5000}
DEFAULT_LAMBDA1 = 2.0
DEFAULT_LAMBDA2 = 1.5


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr: float | None = None
    weight_decay: float = 0.0
    warmup_ratio: float = 0.001
    steps: int | None = None
    batch: int = 32
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    seed: int = 0

    def resolved(self) -> "StageConfig":
        if self.stage not in (0, 1, 2):
            raise ConfigurationError(f"stage must be 0, 1 or 2, got {self.stage}")
        lr = STAGE_DEFAULT_LR[self.stage] if self.lr is None else self.lr
        steps = STAGE_DEFAULT_STEPS[self.stage] if self.steps is None else self.steps
        cfg = replace(self, lr=lr, steps=steps)
        if cfg.lr <= 0 or cfg.steps < 0 or cfg.batch < 1:
            raise ConfigurationError("lr must be > 0, steps >= 0, batch >= 1")
        if cfg.lambda1 < 0 or cfg.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        return cfg

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "lr": self.lr, "weight_decay": self.weight_decay,
            "warmup_ratio": self.warmup_ratio, "steps": self.steps, "batch": self.batch,
            "lambda1": self.lambda1, "lambda2": self.lambda2, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "StageConfig":
        return StageConfig(**d)

    @staticmethod
    def from_file(path) -> "StageConfig":
        with open(path) as fh:
            return StageConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class LossMask:
    """Cumulative-ablation switches for the stage-1 composition."""

    condition: bool = True
    image: bool = True
    llm: bool = True
    eval: bool = True


def compose_stage1_total(l_condition, l_image, l_llm, l_eval,
                         lambda1=DEFAULT_LAMBDA1, lambda2=DEFAULT_LAMBDA2,
                         mask: LossMask = LossMask()):
    """l_condition + l_image + lambda1 * l_llm + lambda2 * l_eval, with
    ablation switches; works on floats and tensors alike."""
    total = 0.0
    if mask.condition:
        total = total + l_condition
    if mask.image:
        total = total + l_image
    if mask.llm:
        total = total + lambda1 * l_llm
    if mask.eval:
        total = total + lambda2 * l_eval
    return total


@dataclass(frozen=True)
class SystemConfig:
    """Architecture and protocol constants shared by all stages."""

    resolution: int = 32
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    ddim_steps: int = 50
    score_weights: tuple[float, float] = (0.5, 0.5)
    rank_temperature: float = 0.5
    corruption: CorruptionPolicy = field(default_factory=CorruptionPolicy)
    joint_cycle: bool = True
    pair_batch_prob: float = 0.25  # fraction of stage-1 batches that are same-kind clean/corrupt pairs
    condition_kinds: tuple[str, ...] = CONDITION_KINDS
    n_val: int = 64
    n_test: int = 200
    validate_every: int = 200
    val_subset: int = 16
    val_ddim_steps: int = 10
    checkpoint_every: int = 0  # 0: only best + final checkpoints

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "denoiser": self.denoiser.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "adapter": self.adapter.to_dict(),
            "timesteps": self.timesteps,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "ddim_steps": self.ddim_steps,
            "score_weights": list(self.score_weights),
            "rank_temperature": self.rank_temperature,
            "corruption": {
                "prob": self.corruption.prob,
                "severity_range": list(self.corruption.severity_range),
                "modes": list(self.corruption.modes),
            },
            "joint_cycle": self.joint_cycle,
            "pair_batch_prob": self.pair_batch_prob,
            "condition_kinds": list(self.condition_kinds),
            "n_val": self.n_val,
            "n_test": self.n_test,
            "validate_every": self.validate_every,
            "val_subset": self.val_subset,
            "val_ddim_steps": self.val_ddim_steps,
            "checkpoint_every": self.checkpoint_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "SystemConfig":
        merged = {**SystemConfig().to_dict(), **d}
        corr = merged["corruption"]
        return SystemConfig(
            resolution=merged["resolution"],
            denoiser=DenoiserConfig.from_dict(merged["denoiser"]),
            evaluator=EvaluatorConfig.from_dict(merged["evaluator"]),
            adapter=AdapterConfig.from_dict(merged["adapter"]),
            timesteps=merged["timesteps"],
            beta_min=merged["beta_min"],
            beta_max=merged["beta_max"],
            ddim_steps=merged["ddim_steps"],
            score_weights=tuple(merged["score_weights"]),
            rank_temperature=merged["rank_temperature"],
            corruption=CorruptionPolicy(
                prob=corr["prob"],
                severity_range=tuple(corr["severity_range"]),
                modes=tuple(corr["modes"]),
            ),
            joint_cycle=merged["joint_cycle"],
            pair_batch_prob=merged["pair_batch_prob"],
            condition_kinds=tuple(merged["condition_kinds"]),
            n_val=merged["n_val"],
            n_test=merged["n_test"],
            validate_every=merged["validate_every"],
            val_subset=merged["val_subset"],
            val_ddim_steps=merged["val_ddim_steps"],
            checkpoint_every=merged["checkpoint_every"],
        )

    @staticmethod
    def small(resolution: int = 16) -> "SystemConfig":
        """Desk-test variant; used by the test-suite fixtures."""
        return SystemConfig(
            resolution=resolution,
            denoiser=DenoiserConfig(resolution=resolution, channels=(16, 32, 64), ctx_dim=32,
                                    temb_dim=64),
            evaluator=EvaluatorConfig(resolution=resolution, width=64, layers=2, heads=4,
                                      num_queries=4, embed_dim=32, resampler_layers=1),
            adapter=AdapterConfig(feat_dim=32, blocks=2, embed_dim=32, heads=2),
            timesteps=200,
            n_val=8,
            n_test=8,
            validate_every=50,
            val_subset=4,
            val_ddim_steps=5,
        )


@dataclass
class TrainingModels:
    system: SystemConfig
    sched: NoiseSchedule
    bundle: GeneratorBundle
    autoencoder: ImageAutoencoder
    evaluator: EvaluatorModel | None = None
    control_model: Denoiser | None = None  # stage-2 denoiser with fresh control branch
    control_text: TextEncoder | None = None
    adapter: MultiControlAdapter | None = None


def build_stage0_models(system: SystemConfig) -> TrainingModels:
    dcfg = system.denoiser
    bundle = GeneratorBundle(
        denoiser=Denoiser(dcfg, with_control_branch=True),
        cond_encoder=ConditionEncoder(dcfg, in_channels=1 + len(CONDITION_KINDS)),
        text_encoder=TextEncoder(ctx_dim=dcfg.ctx_dim),
        stage0_trained=False,
    )
    return TrainingModels(
        system=system,
        sched=system.schedule(),
        bundle=bundle,
        autoencoder=ImageAutoencoder(system.resolution),
    )


def attach_evaluator(models: TrainingModels) -> None:
    models.evaluator = EvaluatorModel(models.system.evaluator)


def attach_stage2(models: TrainingModels) -> None:
    """Fresh multi-control model: base denoiser weights cloned from the
    generator, the control-branch trunk warm-started from the stage-0 branch,
    and zero-initialized injection projections (so the model starts bit-equal
    to the uncontrolled one), plus a new adapter."""
    dcfg = models.system.denoiser
    control_model = Denoiser(dcfg, with_control_branch=False)
    control_model.encoder.load_state_dict(models.bundle.denoiser.encoder.state_dict())
    control_model.decoder.load_state_dict(models.bundle.denoiser.decoder.state_dict())
    control_model.temb.load_state_dict(models.bundle.denoiser.temb.state_dict())
    control_model.attach_control_branch(clone_encoder=True)
    if models.bundle.denoiser.control_branch is not None:
        control_model.control_branch.load_state_dict(
            models.bundle.denoiser.control_branch.state_dict()
        )
    models.control_model = control_model
    models.control_text = copy.deepcopy(models.bundle.text_encoder)
    models.adapter = MultiControlAdapter(models.system.adapter, dcfg)


def _stage_modules(models: TrainingModels, stage: int) -> dict[str, torch.nn.Module]:
    mods = {
        "denoiser": models.bundle.denoiser,
        "cond_encoder": models.bundle.cond_encoder,
        "text_encoder": models.bundle.text_encoder,
        "autoencoder": models.autoencoder,
    }
    if stage >= 1:
        mods["evaluator"] = models.evaluator
    if stage >= 2:
        mods["control_model"] = models.control_model
        mods["control_text"] = models.control_text
        mods["adapter"] = models.adapter
    return mods


def save_stage_checkpoint(path, stage: int, models: TrainingModels, extra: dict | None = None):
    payload_extra = {"vocab": vocab.VOCAB, "stage0_trained": models.bundle.stage0_trained}
    payload_extra.update(extra or {})
    save_checkpoint(path, kind=f"stage{stage}", config=models.system.to_dict(),
                    modules=_stage_modules(models, stage), extra=payload_extra)


def load_stage_checkpoint(path, stage: int) -> tuple[TrainingModels, dict]:
    payload = load_checkpoint(path, expected_kind=f"stage{stage}")
    system = SystemConfig.from_dict(payload["config"])
    models = build_stage0_models(system)
    if stage >= 1:
        attach_evaluator(models)
    if stage >= 2:
        attach_stage2(models)
    restore(payload, _stage_modules(models, stage))
    models.bundle.stage0_trained = bool(payload["extra"].get("stage0_trained", stage >= 1))
    if stage >= 1:
        # the image encoder is a stage-0 artifact, frozen from stage 1 onward
        for p in models.autoencoder.parameters():
            p.requires_grad_(False)
    if stage >= 2:
        models.evaluator.freeze()
    return models, payload


# --- batches --------------------------------------------------------------

@dataclass
class Stage0Batch:
    images: torch.Tensor
    captions: torch.Tensor
    cond_inputs: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


@dataclass
class Stage1Batch:
    images: torch.Tensor
    captions: torch.Tensor
    caption_tokens: list[tuple[int, ...]]
    condition_lists: list[list[ConditionMap]]
    t: torch.Tensor
    eps: torch.Tensor


@dataclass
class Stage2Batch:
    images: torch.Tensor
    captions: torch.Tensor
    caption_tokens: list[tuple[int, ...]]
    condition_lists: list[list[ConditionMap]]
    t: torch.Tensor
    eps: torch.Tensor


def _caption_batch(ds: SceneDataset, idxs) -> tuple[torch.Tensor, list[tuple[int, ...]]]:
    tokens = [ds[i].scene.caption_tokens for i in idxs]
    return pad_captions(tokens), tokens


def build_stage0_batch(ds, idxs, rng, torch_gen, system, sched) -> Stage0Batch:
    images = batch_images([ds[i].image for i in idxs])
    captions, _ = _caption_batch(ds, idxs)
    kinds = system.condition_kinds
    conds = []
    for i in idxs:
        kind = kinds[int(rng.integers(len(kinds)))]
        conds.append(stage0_condition_input(ds[i].conditions[kind]))
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=len(idxs)))
    eps = torch.randn(images.shape, generator=torch_gen)
    return Stage0Batch(images, captions, torch.stack(conds), t, eps)


def build_stage1_batch(ds, idxs, rng, torch_gen, system, sched) -> Stage1Batch:
    images = batch_images([ds[i].image for i in idxs])
    captions, tokens = _caption_batch(ds, idxs)
    kinds = system.condition_kinds
    if rng.random() < system.pair_batch_prob:
        # focused pair batch: one kind, [clean, forced-corrupt] per sample, so the
        # ranking loss carries a concentrated same-kind comparison
        kind = kinds[int(rng.integers(len(kinds)))]
        clean_policy = replace(system.corruption, prob=0.0)
        condition_lists = [
            make_condition_set(ds, i, rng, clean_policy, (kind,), duplicate_kinds=(kind,))[0]
            for i in idxs
        ]
    else:
        # per-batch duplicated kinds keep same-kind contrasts present in mixed
        # sets too (column layout must be batch-uniform)
        n_dup = 1 + int(rng.integers(0, min(2, len(kinds))))
        dup_kinds = tuple(rng.choice(kinds, size=n_dup, replace=False))
        condition_lists = [
            make_condition_set(ds, i, rng, system.corruption, kinds, duplicate_kinds=dup_kinds)[0]
            for i in idxs
        ]
    t = torch.as_tensor(sample_controller_t(sched, rng, len(idxs)))
    eps = torch.randn(images.shape, generator=torch_gen)
    return Stage1Batch(images, captions, tokens, condition_lists, t, eps)


def build_stage2_batch(ds, idxs, rng, torch_gen, system, sched) -> Stage2Batch:
    images = batch_images([ds[i].image for i in idxs])
    captions, tokens = _caption_batch(ds, idxs)
    condition_lists = [
        make_condition_set(ds, i, rng, system.corruption, system.condition_kinds)[0]
        for i in idxs
    ]
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=len(idxs)))
    eps = torch.randn(images.shape, generator=torch_gen)
    return Stage2Batch(images, captions, tokens, condition_lists, t, eps)


def tensorize_columns(condition_lists: list[list[ConditionMap]]):
    """Column-major (kind, canonical, flat) tensors; kinds must agree per column."""
    n = len(condition_lists[0])
    columns = []
    for i in range(n):
        kind = condition_lists[0][i].kind
        if any(cl[i].kind != kind for cl in condition_lists):
            raise ContractError("condition kinds must agree column-wise across the batch")
        canonical = torch.stack([condition_to_tensor(cl[i]) for cl in condition_lists])
        flat = torch.stack([condition_to_flat(cl[i]) for cl in condition_lists]).unsqueeze(1)
        columns.append((kind, canonical, flat))
    return columns


# --- stage losses ----------------------------------------------------------

def stage0_loss(batch: Stage0Batch, models: TrainingModels, sched: NoiseSchedule) -> tuple:
    x0m = scale_to_model(batch.images)
    x_t = q_sample(x0m, batch.t, batch.eps, sched)
    ctx = models.bundle.text_encoder(batch.captions)
    controls = models.bundle.cond_encoder(batch.cond_inputs)
    eps_pred = models.bundle.denoiser(x_t, batch.t, ctx, controls)
    diff = ((eps_pred - batch.eps) ** 2).mean()
    recon = models.autoencoder(batch.images)
    ae = ((recon - batch.images) ** 2).mean()
    return diff + ae, {"diffusion": float(diff.detach()), "autoencoder": float(ae.detach())}


def stage1_loss(
    batch: Stage1Batch,
    models: TrainingModels,
    sched: NoiseSchedule,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    mask: LossMask = LossMask(),
    joint: bool | None = None,
    rank_targets_override: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Eq.-style composition: l_condition + l_image + lambda1 * l_llm + lambda2 * l_eval.

    The ranking targets come from the exact-path controller scores of the same
    generator pass and enter as constants; the condition/image terms carry
    gradients into the generator when the joint toggle is on.
    rank_targets_override pins the (already constant) targets to given scores,
    which finite-difference checks need to probe the differentiable path alone.
    """
    if models.evaluator is None:
        raise PreconditionError("stage-1 loss requires an evaluator (stage-0 checkpoint loaded?)")
    system = models.system
    joint = system.joint_cycle if joint is None else joint
    result = controller_pass(
        models.bundle, batch.images, batch.captions, batch.condition_lists, sched,
        models.autoencoder, t_vec=batch.t, eps=batch.eps, differentiable=joint,
        weights=system.score_weights,
    )
    l_condition = result.l_cond.mean()
    l_image = result.l_img.mean()
    inputs = [
        make_evaluator_input(conds, tokens)
        for conds, tokens in zip(batch.condition_lists, batch.caption_tokens)
    ]
    out = models.evaluator(inputs)
    l_llm = loss_token(out)
    if rank_targets_override is not None:
        targets = rank_targets_override
    else:
        targets = torch.as_tensor(result.exact_scores)
    l_eval = loss_rank(out.p, targets, temperature=system.rank_temperature)

    total = compose_stage1_total(
        l_condition.double(), l_image.double(), l_llm.double(), l_eval.double(),
        float(lambda1), float(lambda2), mask,
    )
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(total, dtype=torch.float64)
    components = {
        "l_condition": float(l_condition.detach()),
        "l_image": float(l_image.detach()),
        "l_llm": float(l_llm.detach()),
        "l_eval": float(l_eval.detach()),
    }
    return total, components


def stage2_loss(batch: Stage2Batch, models: TrainingModels, sched: NoiseSchedule) -> torch.Tensor:
    """Plain noise-prediction MSE with adapter-fused controls; the evaluator
    must be frozen and receives exactly zero gradient."""
    if models.evaluator is None or models.adapter is None or models.control_model is None:
        raise PreconditionError("stage-2 loss requires evaluator, adapter and control model")
    if not models.evaluator.frozen:
        raise ContractError("evaluator must be frozen during stage-2 training")
    with torch.no_grad():
        inputs = [
            make_evaluator_input(conds, tokens)
            for conds, tokens in zip(batch.condition_lists, batch.caption_tokens)
        ]
        ev = models.evaluator(inputs)
    res = gate(ev.p, models.adapter.selection_gate("train_soft"))
    columns = tensorize_columns(batch.condition_lists)
    controls = models.adapter.forward_batch(
        columns, res.weights, ev.p.detach().numpy(), ev.embeddings
    )
    x0m = scale_to_model(batch.images)
    x_t = q_sample(x0m, batch.t, batch.eps, sched)
    ctx = models.control_text(batch.captions)
    eps_pred = models.control_model(x_t, batch.t, ctx, controls)
    return ((eps_pred - batch.eps) ** 2).mean()


# --- validation ------------------------------------------------------------

def controller_scores_for(models, bundle_idx, ds, conditions, sched, seed) -> np.ndarray:
    b = ds[bundle_idx]
    sample = ControllerSample(b.image, b.scene.caption_tokens, conditions)
    scores = score_conditions(
        models.bundle, sample, sched, models.autoencoder,
        t=sched.T // 2, seed=seed, weights=models.system.score_weights,
    )
    return np.array([s.score for s in scores])


def fixed_validation_sets(ds, idxs, system, seed, duplicates: int = 2) -> list[list[ConditionMap]]:
    """Frozen per-scene condition sets; duplicated kinds make the validation
    Spearman sensitive to within-kind (clean vs corrupt) ordering as well."""
    rng = np.random.default_rng(seed)
    kinds = system.condition_kinds
    sets = []
    for i in idxs:
        n_dup = min(duplicates, len(kinds))
        dup = tuple(rng.choice(kinds, size=n_dup, replace=False)) if n_dup else ()
        sets.append(
            make_condition_set(ds, i, rng, system.corruption, kinds, duplicate_kinds=dup)[0]
        )
    return sets


def validate_stage1(models, ds, idxs, cond_sets, sched) -> dict:
    rhos = []
    inputs = []
    for i, conds in zip(idxs, cond_sets):
        inputs.append(make_evaluator_input(conds, ds[i].scene.caption_tokens))
    with torch.no_grad():
        p = models.evaluator(inputs).p.numpy()
    for row, (i, conds) in enumerate(zip(idxs, cond_sets)):
        s = controller_scores_for(models, i, ds, conds, sched, seed=10_000 + ds[i].scene_id)
        rhos.append(spearman(p[row], s))
    return {"spearman": float(np.mean(rhos))}


def validate_stage2(models, ds, idxs, cond_sets, sched, ddim_steps=None, seed=0) -> dict:
    from .pipeline import evaluate_generation  # local import to avoid a cycle

    system = models.system
    ddim_steps = ddim_steps or system.val_ddim_steps
    result, _, _ = evaluate_generation(
        models, ds, idxs, cond_sets, steps=ddim_steps, seed=seed, selection="adaptive"
    )
    out = {f"consistency_{k}": v for k, v in result.consistency.items()}
    out["consistency_mean"] = result.consistency_mean
    out["alignment"] = result.alignment
    out["ssim"] = result.ssim
    return out


# --- run loop ----------------------------------------------------------------

@dataclass
class RunResult:
    final_ckpt: Path
    best_ckpt: Path | None
    metrics_path: Path
    final_metrics: dict
    history: list[dict]


def lr_at(step: int, total: int, base: float, warmup_ratio: float) -> float:
    warmup = max(1, int(round(warmup_ratio * total)))
    if step <= warmup:
        return base * step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class MetricsLog:
    def __init__(self, path: Path, stage: int, seed: int):
        self.path = path
        self.fh = open(path, "w")
        self.fh.write(json.dumps({"log": "multicond-metrics", "version": 1, "stage": stage,
                                  "seed": seed}) + "\n")
        self.fh.flush()

    def write(self, step: int, split: str, metric: str, value: float) -> None:
        self.fh.write(json.dumps({"step": step, "split": split, "metric": metric,
                                  "value": float(value)}) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _trainable_params(models: TrainingModels, stage: int, joint: bool):
    if stage == 0:
        mods = [models.bundle.denoiser, models.bundle.cond_encoder, models.bundle.text_encoder,
                models.autoencoder]
    elif stage == 1:
        mods = [models.evaluator]
        if joint:
            mods += [models.bundle.denoiser, models.bundle.cond_encoder,
                     models.bundle.text_encoder]
    else:
        mods = [models.control_model, models.control_text, models.adapter]
    params = []
    for m in mods:
        params += [p for p in m.parameters() if p.requires_grad]
    return params


def run_stage(
    cfg: StageConfig,
    data_dir,
    out_dir,
    system: SystemConfig | None = None,
    prior: dict[int, str | Path] | None = None,
    loss_mask: LossMask = LossMask(),
    resume_from: str | Path | None = None,
) -> RunResult:
    """Train one stage end to end: cosine lr with warmup, periodic validation,
    best + final checkpoints, line-delimited metrics log."""
    cfg = cfg.resolved()
    prior = prior or {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)

    # prerequisite checkpoints
    if cfg.stage == 1 and 0 not in prior:
        raise PreconditionError("stage 1 requires a stage-0 checkpoint (missing: stage 0)")
    if cfg.stage == 2 and 1 not in prior:
        raise PreconditionError("stage 2 requires a stage-1 checkpoint (missing: stage 1)")

    if cfg.stage == 0:
        system = system or SystemConfig()
        torch.manual_seed(cfg.seed)
        models = build_stage0_models(system)
    else:
        if cfg.stage == 1:
            models, _ = load_stage_checkpoint(prior[0], 0)
            torch.manual_seed(cfg.seed)
            attach_evaluator(models)
            models.bundle.stage0_trained = True
            for p in models.autoencoder.parameters():
                p.requires_grad_(False)
        else:
            models, _ = load_stage_checkpoint(prior[1], 1)
            torch.manual_seed(cfg.seed)
            models.evaluator.freeze()
            attach_stage2(models)
        if system is not None:
            # protocol-level override (e.g. condition subsets); architecture is pinned
            for name in ("denoiser", "evaluator", "adapter"):
                if system.to_dict()[name] != models.system.to_dict()[name]:
                    raise ConfigurationError(
                        f"{name} architecture may not be overridden after stage 0"
                    )
            models.system = system
        system = models.system

    if system.resolution != ds.resolution:
        raise ConfigurationError(
            f"dataset resolution {ds.resolution} != configured resolution {system.resolution}"
        )
    sched = models.sched
    splits = split_dataset(ds, system.n_val, system.n_test)

    rng = np.random.default_rng(cfg.seed)
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    joint = system.joint_cycle

    params = _trainable_params(models, cfg.stage, joint)
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)

    start_step = 0
    best_metric = -float("inf")
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_kind=f"stage{cfg.stage}")
        restore(payload, _stage_modules(models, cfg.stage))
        state = payload["extra"]["train_state"]
        opt.load_state_dict(state["optimizer"])
        torch_gen.set_state(torch.as_tensor(state["torch_gen"], dtype=torch.uint8))
        rng.bit_generator.state = state["np_rng"]
        start_step = state["step"]
        best_metric = state["best_metric"]

    log = MetricsLog(out_dir / f"stage{cfg.stage}-metrics.jsonl", cfg.stage, cfg.seed)
    best_path = out_dir / f"stage{cfg.stage}-best.ckpt"
    history: list[dict] = []
    val_sets = fixed_validation_sets(ds, splits.val, system, seed=cfg.seed + 777)

    def train_state() -> dict:
        return {
            "step": step,
            "optimizer": opt.state_dict(),
            "torch_gen": torch_gen.get_state(),
            "np_rng": rng.bit_generator.state,
            "best_metric": best_metric,
        }

    def run_validation(step: int) -> dict:
        if cfg.stage == 0:
            idxs = splits.val[: system.val_subset]
            vb = build_stage0_batch(ds, idxs, np.random.default_rng(cfg.seed + 13),
                                    torch.Generator().manual_seed(cfg.seed + 13), system, sched)
            with torch.no_grad():
                loss, comps = stage0_loss(vb, models, sched)
            metrics = {"val_loss": float(loss), **comps}
        elif cfg.stage == 1:
            metrics = validate_stage1(models, ds, splits.val, val_sets, sched)
            vidx = splits.val[: min(len(splits.val), 8)]
            vb = build_stage1_batch(ds, vidx, np.random.default_rng(cfg.seed + 31),
                                    torch.Generator().manual_seed(cfg.seed + 31), system, sched)
            with torch.no_grad():
                _, comps = stage1_loss(vb, models, sched, cfg.lambda1, cfg.lambda2, joint=False)
            metrics.update(comps)
        else:
            idxs = splits.val[: system.val_subset]
            metrics = validate_stage2(models, ds, idxs, val_sets[: len(idxs)], sched,
                                      seed=cfg.seed)
        for name, value in metrics.items():
            log.write(step, "val", name, value)
        history.append({"step": step, **metrics})
        return metrics

    step = start_step
    if cfg.steps == 0:
        final = out_dir / f"stage{cfg.stage}-step0.ckpt"
        save_stage_checkpoint(final, cfg.stage, models, extra={"train_state": train_state()})
        log.close()
        return RunResult(final_ckpt=final, best_ckpt=None, metrics_path=log.path,
                         final_metrics={}, history=history)

    if cfg.stage == 1 and start_step == 0:
        run_validation(0)

    final_metrics: dict = {}
    for step in range(start_step + 1, cfg.steps + 1):
        lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio)
        for group in opt.param_groups:
            group["lr"] = lr
        idxs = rng.choice(splits.train, size=min(cfg.batch, len(splits.train)), replace=False)
        if cfg.stage == 0:
            batch = build_stage0_batch(ds, idxs, rng, torch_gen, system, sched)
            total, comps = stage0_loss(batch, models, sched)
        elif cfg.stage == 1:
            batch = build_stage1_batch(ds, idxs, rng, torch_gen, system, sched)
            total, comps = stage1_loss(batch, models, sched, cfg.lambda1, cfg.lambda2,
                                       mask=loss_mask, joint=joint)
        else:
            batch = build_stage2_batch(ds, idxs, rng, torch_gen, system, sched)
            total = stage2_loss(batch, models, sched)
            comps = {}
        if not torch.isfinite(total):
            snap = out_dir / f"stage{cfg.stage}-diverged.ckpt"
            save_stage_checkpoint(snap, cfg.stage, models,
                                  extra={"train_state": train_state(), "diverged_at": step})
            log.close()
            raise TrainingDiverged(f"non-finite loss at step {step}; snapshot at {snap}")
        opt.zero_grad()
        if total.requires_grad:
            total.backward()
        opt.step()
        if step % 25 == 0 or step == 1:
            log.write(step, "train", "loss", float(total))
            for name, value in comps.items():
                log.write(step, "train", name, value)
        if step % system.validate_every == 0 or step == cfg.steps:
            final_metrics = run_validation(step)
            key = {"0": "val_loss", "1": "spearman", "2": "consistency_mean"}[str(cfg.stage)]
            score = -final_metrics[key] if cfg.stage == 0 else final_metrics[key]
            if score > best_metric:
                best_metric = score
                save_stage_checkpoint(best_path, cfg.stage, models,
                                      extra={"train_state": train_state()})
        if system.checkpoint_every and step % system.checkpoint_every == 0 and step < cfg.steps:
            save_stage_checkpoint(out_dir / f"stage{cfg.stage}-step{step}.ckpt", cfg.stage,
                                  models, extra={"train_state": train_state()})

    final = out_dir / f"stage{cfg.stage}-step{cfg.steps}.ckpt"
    save_stage_checkpoint(final, cfg.stage, models, extra={"train_state": train_state()})
    log.close()
    return RunResult(
        final_ckpt=final,
        best_ckpt=best_path if best_path.exists() else None,
        metrics_path=log.path,
        final_metrics=final_metrics,
        history=history,
    )
