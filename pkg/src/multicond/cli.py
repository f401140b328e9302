"""Command-line entry points: dataset generation, staged training, sampling,
condition ranking, ablations, and report rendering.

Exit codes: 0 success, 2 usage/config problem, 3 missing prerequisite
artifact, 4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .ablation import AblationConfig, run_combos_ablation, run_losses_ablation, run_selection_ablation
from .checkpoint import load_checkpoint
from .dataset import (
    CorruptionPolicy,
    load_condition_raster,
    load_dataset,
    make_condition_set,
    write_dataset,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DomainError,
    PreconditionError,
    TrainingDiverged,
)
from .experiment import ExperimentManifest
from .metrics import build_report, load_records, save_image_grid
from .pipeline import generate_with_selection, select_conditions
from .scenes import CONDITION_KINDS
from .training import StageConfig, SystemConfig, load_stage_checkpoint, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def cmd_gen_data(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int.from_bytes(os.urandom(4), "big")
        print(f"no --seed given; using recorded seed {seed}")
    try:
        manifest = write_dataset(args.out, n_scenes=args.scenes, seed=seed, resolution=args.res)
    except OSError as exc:
        print(f"cannot write dataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.scenes} scenes to {manifest}")
    return EXIT_OK


def _resolve_seed(args, cfg_dict: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg_dict:
        return int(cfg_dict["seed"])
    return int.from_bytes(os.urandom(4), "big")


def cmd_train(args) -> int:
    cfg_dict = _load_json(args.config) if args.config else {}
    cfg_dict.setdefault("stage", args.stage)
    if cfg_dict["stage"] != args.stage:
        raise ConfigurationError(
            f"--stage {args.stage} conflicts with config stage {cfg_dict['stage']}"
        )
    seed = _resolve_seed(args, cfg_dict)
    cfg_dict["seed"] = seed
    cfg = StageConfig.from_dict(cfg_dict)

    system = None
    if args.system:
        system = SystemConfig.from_dict(_load_json(args.system))

    out_root = Path(args.out)
    manifest = None
    if (out_root / "experiment.json").exists():
        manifest = ExperimentManifest.load(out_root)
    prior = {}
    if manifest is not None:
        for k, path in manifest.lineage.items():
            prior[int(k.removeprefix("stage"))] = path
    if args.stage >= 1 and (args.stage - 1) not in prior:
        print(f"missing prerequisite: no stage-{args.stage - 1} checkpoint in {out_root}",
              file=sys.stderr)
        return EXIT_MISSING

    result = run_stage(cfg, args.data, out_root / f"stage{args.stage}", system=system,
                       prior=prior)
    if manifest is None:
        manifest = ExperimentManifest(
            experiment_id=out_root.name, config={}, dataset=str(args.data), seed=seed,
        )
    manifest.config[f"stage{args.stage}"] = cfg.resolved().to_dict()
    manifest.lineage[f"stage{args.stage}"] = str(result.final_ckpt)
    if result.best_ckpt is not None:
        manifest.lineage[f"stage{args.stage}-best"] = str(result.best_ckpt)
    manifest.save(out_root)
    print(f"stage {args.stage} complete: {result.final_ckpt}")
    for name, value in result.final_metrics.items():
        print(f"  {name} = {value:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    models, _ = load_stage_checkpoint(args.ckpt, 2)
    ds = load_dataset(args.data)
    if not 0 <= args.scene_id < len(ds):
        raise ConfigurationError(f"scene id {args.scene_id} outside dataset of {len(ds)}")
    rng = np.random.default_rng(args.seed)
    policy = models.system.corruption if args.corrupt_conditions else CorruptionPolicy(prob=0.0)
    conds, _ = make_condition_set(ds, args.scene_id, rng, policy,
                                  models.system.condition_kinds)
    selection = ("fixed", args.fixed_k) if args.fixed_k else "adaptive"
    images, records = generate_with_selection(
        models, ds, [args.scene_id], [conds], steps=args.steps, seed=args.seed,
        selection=selection,
    )
    from PIL import Image

    Image.fromarray((images[0] * 255).round().astype(np.uint8)).save(args.out)
    rec = records[0]
    print(f"selected ids {list(rec.selected_ids)} (theta={rec.theta:.3f}); wrote {args.out}")
    return EXIT_OK


def _load_evaluator_ckpt(path):
    payload = load_checkpoint(path)
    kind = payload.get("kind")
    if kind not in ("stage1", "stage2"):
        raise CheckpointError(f"{path} holds {kind!r}; need a stage1 or stage2 checkpoint")
    models, _ = load_stage_checkpoint(path, int(kind.removeprefix("stage")))
    return models, kind


def cmd_rank(args) -> int:
    models, kind = _load_evaluator_ckpt(args.ckpt)
    models.evaluator.freeze()
    if args.scene_id is not None:
        if not args.data:
            raise ConfigurationError("--scene-id requires --data")
        ds = load_dataset(args.data)
        if not 0 <= args.scene_id < len(ds):
            raise ConfigurationError(f"scene id {args.scene_id} outside dataset of {len(ds)}")
        bundle = ds[args.scene_id]
        caption = bundle.scene.caption_tokens
        if args.corrupt_conditions:
            rng = np.random.default_rng(args.seed)
            conditions, _ = make_condition_set(ds, args.scene_id, rng,
                                               models.system.corruption,
                                               models.system.condition_kinds)
        else:
            conditions = [bundle.conditions[k] for k in models.system.condition_kinds]
    elif args.conditions:
        conditions = []
        caption = ()
        for path in args.conditions:
            stem = Path(path).stem
            kind_guess = stem.rsplit("_", 1)[-1]
            if kind_guess not in CONDITION_KINDS:
                raise ConfigurationError(
                    f"cannot infer condition kind from {path}; expected *_<kind>.png"
                )
            conditions.append(load_condition_raster(path, kind_guess))
    else:
        raise ConfigurationError("need --scene-id or --conditions")

    theta = args.theta
    if theta is None:
        theta = float(models.adapter.theta) if kind == "stage2" and models.adapter is not None else 0.5
    with torch.no_grad():
        from .evaluator import make_evaluator_input

        p = models.evaluator(make_evaluator_input(conditions, caption)).p[0].numpy()
    order = sorted(range(len(conditions)), key=lambda i: (-p[i], i))
    selected = {i for i in order if p[i] >= theta} or {order[0]}
    if args.json:
        for i in order:
            print(json.dumps({
                "condition_id": i, "kind": conditions[i].kind, "score": float(p[i]),
                "selected": i in selected,
            }, sort_keys=True))
    else:
        print(f"theta = {theta:.3f}")
        for rank, i in enumerate(order):
            mark = "yes" if i in selected else "no"
            print(f"{rank + 1}. kind={conditions[i].kind} score={p[i]:.4f} selected={mark}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    acfg = AblationConfig.from_file(args.config) if args.config else AblationConfig()
    stage0 = args.stage0_ckpt
    stage1 = args.stage1_ckpt
    if args.exp:
        manifest = ExperimentManifest.load(args.exp)
        stage0 = stage0 or manifest.lineage.get("stage0")
        stage1 = stage1 or manifest.lineage.get("stage1")
    if args.mode == "losses":
        if not stage0:
            print("missing prerequisite: stage-0 checkpoint (use --stage0-ckpt or --exp)",
                  file=sys.stderr)
            return EXIT_MISSING
        _, (records_path, report_path), _ = run_losses_ablation(args.data, args.out, stage0, acfg)
    else:
        if not stage1:
            print("missing prerequisite: stage-1 checkpoint (use --stage1-ckpt or --exp)",
                  file=sys.stderr)
            return EXIT_MISSING
        runner = run_selection_ablation if args.mode == "selection" else run_combos_ablation
        _, (records_path, report_path), _ = runner(args.data, args.out, stage1, acfg)
    print(f"records: {records_path}\nreport: {report_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = load_records(args.records)
    text = build_report(records, grouping=args.group)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multicond",
        description="Dynamic multi-condition controllable diffusion at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"multicond {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--scenes", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=None, help="base seed (recorded if omitted)")
    g.add_argument("--res", type=int, default=32, help="image resolution")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--config", help="StageConfig JSON file")
    t.add_argument("--system", help="SystemConfig JSON file (stage 0 or protocol override)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="experiment root directory")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate an image with the stage-2 model")
    s.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--scene-id", type=int, required=True)
    s.add_argument("--out", required=True, help="output PNG path")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fixed-k", type=int, default=None, help="fixed top-k selection")
    s.add_argument("--corrupt-conditions", action="store_true")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("rank", help="rank condition maps with the evaluator")
    r.add_argument("--ckpt", required=True, help="stage-1 or stage-2 checkpoint")
    r.add_argument("--data")
    r.add_argument("--scene-id", type=int, default=None)
    r.add_argument("--conditions", nargs="+", help="condition raster paths (*_<kind>.png)")
    r.add_argument("--corrupt-conditions", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--theta", type=float, default=None, help="selection threshold override")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_rank)

    a = sub.add_parser("ablate", help="run an ablation study")
    a.add_argument("--mode", choices=("losses", "selection", "combos"), required=True)
    a.add_argument("--config", help="AblationConfig JSON file")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--exp", help="experiment root to read checkpoint lineage from")
    a.add_argument("--stage0-ckpt")
    a.add_argument("--stage1-ckpt")
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render metric records as a report")
    p.add_argument("--records", required=True)
    p.add_argument("--group", choices=("seed",), default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DomainError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError,) as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
