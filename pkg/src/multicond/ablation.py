"""Ablation runners: cumulative loss variants, selection schemes, and
condition-type combinations.  Each emits metric records, a rendered report,
and sample image grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
import torch

from .dataset import CorruptionPolicy, load_dataset, make_condition_set, split_dataset
from .errors import ConfigurationError
from .metrics import MetricRecord, build_report, frechet_distance, save_image_grid, write_records
from .pipeline import evaluate_generation, generate_with_selection
from .scenes import CONDITION_KINDS
from .torchbridge import batch_images
from .training import (
    LossMask,
    StageConfig,
    fixed_validation_sets,
    load_stage_checkpoint,
    run_stage,
    validate_stage1,
)

LOSS_VARIANTS = [
    ("base", None),  # no stage-1 training at all
    ("+condition", LossMask(condition=True, image=False, llm=False, eval=False)),
    ("+image", LossMask(condition=True, image=True, llm=False, eval=False)),
    ("+llm", LossMask(condition=True, image=True, llm=True, eval=False)),
    ("+eval", LossMask(condition=True, image=True, llm=True, eval=True)),
]

COMBO_SETS = [
    ("luma", ("luma",)),
    ("luma+seg", ("luma", "seg")),
    ("luma+seg+softedge", ("luma", "seg", "softedge")),
    ("all", CONDITION_KINDS),
]

FIXED_KS = (1, 2, 3, 4)


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    stage1_steps: int = 600
    stage2_steps: int = 500
    batch: int = 16
    eval_scenes: int = 32
    eval_ddim_steps: int = 20

    @staticmethod
    def from_file(path) -> "AblationConfig":
        with open(path) as fh:
            d = json.load(fh)
        base = AblationConfig()
        return AblationConfig(
            seeds=tuple(d.get("seeds", base.seeds)),
            stage1_steps=d.get("stage1_steps", base.stage1_steps),
            stage2_steps=d.get("stage2_steps", base.stage2_steps),
            batch=d.get("batch", base.batch),
            eval_scenes=d.get("eval_scenes", base.eval_scenes),
            eval_ddim_steps=d.get("eval_ddim_steps", base.eval_ddim_steps),
        )


def fd_proxy(models, real_images, gen_images) -> float:
    """Frechet distance on the frozen stage-0 autoencoder features."""
    with torch.no_grad():
        fa = models.autoencoder.encode(batch_images(real_images)).numpy()
        fb = models.autoencoder.encode(batch_images(gen_images)).numpy()
    return frechet_distance(fa, fb)


def _eval_sets(ds, idxs, system, seed, corrupt: bool, kinds=None):
    kinds = kinds or system.condition_kinds
    rng = np.random.default_rng(seed)
    policy = system.corruption if corrupt else CorruptionPolicy(prob=0.0)
    return [make_condition_set(ds, i, rng, policy, kinds)[0] for i in idxs]


def _finish(out_dir: Path, name: str, records, grouping=None) -> tuple[Path, Path]:
    records_path = out_dir / f"{name}-records.jsonl"
    write_records(records, records_path)
    report_path = out_dir / f"{name}-report.md"
    report_path.write_text(build_report(records, grouping=grouping))
    return records_path, report_path


def run_losses_ablation(data_dir, out_dir, stage0_ckpt, acfg: AblationConfig):
    """Cumulative loss ablation: base, +condition, +image, +llm, +eval."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = acfg.seeds[0]
    records: list[MetricRecord] = []
    artifacts: dict = {}
    for label, mask in LOSS_VARIANTS:
        vdir = out_dir / f"losses-{label.strip('+')}"
        steps1 = 0 if mask is None else acfg.stage1_steps
        r1 = run_stage(
            StageConfig(stage=1, steps=steps1, batch=acfg.batch, seed=seed),
            data_dir, vdir / "stage1", prior={0: stage0_ckpt},
            loss_mask=mask or LossMask(),
        )
        r2 = run_stage(
            StageConfig(stage=2, steps=acfg.stage2_steps, batch=acfg.batch, seed=seed),
            data_dir, vdir / "stage2", prior={1: r1.final_ckpt},
        )
        models, _ = load_stage_checkpoint(r2.final_ckpt, 2)
        ds = load_dataset(data_dir)
        splits = split_dataset(ds, models.system.n_val, models.system.n_test)
        val_sets = fixed_validation_sets(ds, splits.val, models.system, seed=seed + 777)
        rho = validate_stage1(models, ds, splits.val, val_sets, models.sched)["spearman"]
        idxs = splits.test[: acfg.eval_scenes]
        sets = _eval_sets(ds, idxs, models.system, seed + 5, corrupt=True)
        ev, gen_images, _ = evaluate_generation(
            models, ds, idxs, sets, steps=acfg.eval_ddim_steps, seed=seed, selection="adaptive"
        )
        fd = fd_proxy(models, [ds[i].image for i in idxs], gen_images)
        for metric, value in [
            ("spearman", rho), ("fd_proxy", fd), ("alignment", ev.alignment),
            ("ssim", ev.ssim), ("consistency_mean", ev.consistency_mean),
        ]:
            records.append(MetricRecord("losses", label, metric, value,
                                        n_samples=len(idxs), seed=seed))
        artifacts[label] = str(r2.final_ckpt)
    return records, _finish(out_dir, "losses", records), artifacts


def run_selection_ablation(data_dir, out_dir, stage1_ckpt, acfg: AblationConfig,
                           stage2_ckpts: dict[int, str] | None = None):
    """Fixed-k (k = 1..4) vs adaptive-threshold selection, per seed.

    stage2_ckpts may supply already-trained adaptive stage-2 checkpoints per
    seed (e.g. from the combos ablation); missing seeds are trained here.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage2_ckpts = dict(stage2_ckpts or {})
    records: list[MetricRecord] = []
    grids_done = False
    for seed in acfg.seeds:
        if seed in stage2_ckpts:
            ckpt = stage2_ckpts[seed]
        else:
            r2 = run_stage(
                StageConfig(stage=2, steps=acfg.stage2_steps, batch=acfg.batch, seed=seed),
                data_dir, out_dir / f"seed{seed}" / "stage2", prior={1: stage1_ckpt},
            )
            ckpt = r2.final_ckpt
        models, _ = load_stage_checkpoint(ckpt, 2)
        ds = load_dataset(data_dir)
        splits = split_dataset(ds, models.system.n_val, models.system.n_test)
        idxs = splits.test[: acfg.eval_scenes]
        sets = _eval_sets(ds, idxs, models.system, seed + 5, corrupt=True)
        n_kinds = len(models.system.condition_kinds)
        modes = [("fixed", k) for k in FIXED_KS if k <= n_kinds] + ["adaptive"]
        for mode in modes:
            label = "adaptive" if mode == "adaptive" else f"fixed-{mode[1]}"
            ev, _, _ = evaluate_generation(
                models, ds, idxs, sets, steps=acfg.eval_ddim_steps, seed=seed, selection=mode
            )
            for metric, value in [("alignment", ev.alignment), ("ssim", ev.ssim),
                                  ("consistency_mean", ev.consistency_mean)]:
                records.append(MetricRecord("selection", label, metric, value,
                                            n_samples=len(idxs), seed=seed))
        if not grids_done:
            _progressive_grid(models, ds, idxs[0], sets[0], acfg, out_dir / "grid_scene0.png")
            grids_done = True
        stage2_ckpts[seed] = str(ckpt)
    return records, _finish(out_dir, "selection", records, grouping="seed"), stage2_ckpts


def _progressive_grid(models, ds, idx, conds, acfg, path):
    """Left to right: generations with the top-1, top-2, ... conditions."""
    images = []
    for k in range(1, len(conds) + 1):
        imgs, _ = generate_with_selection(
            models, ds, [idx], [conds], steps=acfg.eval_ddim_steps, seed=0,
            selection=("fixed", k),
        )
        images.append(imgs[0])
    save_image_grid(images, path)


def run_combos_ablation(data_dir, out_dir, stage1_ckpt, acfg: AblationConfig):
    """Condition-subset comparison: {luma} .. {all}, rows ordered by subset size."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[MetricRecord] = []
    all_ckpts: dict[int, str] = {}
    for seed in acfg.seeds:
        for label, kinds in COMBO_SETS:
            models1, payload = load_stage_checkpoint(stage1_ckpt, 1)
            system = dc_replace(models1.system, condition_kinds=tuple(kinds))
            cdir = out_dir / f"seed{seed}" / label.replace("+", "_")
            r2 = run_stage(
                StageConfig(stage=2, steps=acfg.stage2_steps, batch=acfg.batch, seed=seed),
                data_dir, cdir, prior={1: stage1_ckpt}, system=system,
            )
            models, _ = load_stage_checkpoint(r2.final_ckpt, 2)
            ds = load_dataset(data_dir)
            splits = split_dataset(ds, models.system.n_val, models.system.n_test)
            idxs = splits.test[: acfg.eval_scenes]
            sets = _eval_sets(ds, idxs, models.system, seed + 5, corrupt=False, kinds=kinds)
            ev, gen_images, _ = evaluate_generation(
                models, ds, idxs, sets, steps=acfg.eval_ddim_steps, seed=seed,
                selection="all", metric_kinds=CONDITION_KINDS,
            )
            fd = fd_proxy(models, [ds[i].image for i in idxs], gen_images)
            for metric, value in [
                ("consistency_mean", ev.consistency_mean), ("fd_proxy", fd),
                ("alignment", ev.alignment), ("ssim", ev.ssim),
            ]:
                records.append(MetricRecord("combos", label, metric, value,
                                            n_samples=len(idxs), seed=seed))
            if label == "all":
                all_ckpts[seed] = str(r2.final_ckpt)
    return records, _finish(out_dir, "combos", records, grouping="seed"), all_ckpts
