"""Dataset directory format and in-memory loading.

A dataset is a directory with `manifest.jsonl` (one record per scene: seed,
shape list, caption, file paths) plus lossless 8-bit rasters for the image and
every condition map.  Loading re-renders scenes from their manifest specs, so
in-memory ground truth stays exact; the rasters are the interchange format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import vocab
from .errors import ConfigurationError, DomainError, PreconditionError
from .scenes import (
    CONDITION_KINDS,
    ConditionMap,
    CorruptionSpec,
    GenerationConfig,
    SceneSpec,
    corrupt,
    gen_scene,
    render,
)

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SceneBundle:
    scene_id: int
    scene: SceneSpec
    image: np.ndarray
    conditions: dict[str, ConditionMap]


def _caption_text(tokens) -> str:
    words = [vocab.VOCAB[t] for t in tokens if t not in (vocab.BOS_ID, vocab.EOS_ID, vocab.PAD_ID)]
    return " ".join(words)


def save_image_raster(image: np.ndarray, path: Path) -> None:
    Image.fromarray((image * 255).round().astype(np.uint8)).save(path)


def save_condition_raster(cond: ConditionMap, path: Path) -> None:
    if cond.kind == "seg":
        arr = cond.data.astype(np.uint8)
    elif cond.kind == "edge":
        arr = (cond.data * 255).astype(np.uint8)
    else:
        arr = (cond.data * 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_condition_raster(path: str | Path, kind: str) -> ConditionMap:
    arr = np.asarray(Image.open(path).convert("L"))
    if kind == "seg":
        data = arr.astype(np.int64)
    elif kind == "edge":
        data = (arr >= 128).astype(np.float64)
    else:
        data = arr.astype(np.float64) / 255.0
    return ConditionMap(kind=kind, data=data, provenance="ground_truth")


def write_dataset(out_dir: str | Path, n_scenes: int, seed: int, resolution: int = 32) -> Path:
    """Generate and persist a dataset; deterministic in (n_scenes, seed, resolution)."""
    if n_scenes < 1:
        raise ConfigurationError("need at least one scene")
    out_dir = Path(out_dir)
    cfg = GenerationConfig(resolution=resolution)
    cfg.validate()
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "conditions").mkdir(parents=True, exist_ok=True)
    records = []
    for idx in range(n_scenes):
        scene = gen_scene(seed + idx, cfg)
        out = render(scene, resolution)
        stem = f"scene_{idx:05d}"
        img_rel = f"images/{stem}.png"
        save_image_raster(out.image, out_dir / img_rel)
        cond_rels = {}
        for kind in CONDITION_KINDS:
            rel = f"conditions/{stem}_{kind}.png"
            save_condition_raster(out.conditions[kind], out_dir / rel)
            cond_rels[kind] = rel
        rec = {
            "scene_id": idx,
            "caption": _caption_text(scene.caption_tokens),
            "image": img_rel,
            "conditions": cond_rels,
            "resolution": resolution,
            **scene.to_dict(),
        }
        records.append(rec)
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_dir / MANIFEST_NAME


class SceneDataset:
    """In-memory dataset; ground truth re-rendered exactly from manifest specs."""

    def __init__(self, root: Path, bundles: list[SceneBundle], resolution: int):
        self.root = root
        self.bundles = bundles
        self.resolution = resolution

    def __len__(self) -> int:
        return len(self.bundles)

    def __getitem__(self, idx: int) -> SceneBundle:
        return self.bundles[idx]


def load_dataset(path: str | Path) -> SceneDataset:
    root = Path(path)
    manifest = root / MANIFEST_NAME if root.is_dir() else root
    if not manifest.exists():
        raise PreconditionError(f"dataset manifest not found at {manifest}")
    bundles = []
    resolution = None
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            scene = SceneSpec.from_dict(rec)
            resolution = rec["resolution"]
            out = render(scene, resolution)
            bundles.append(
                SceneBundle(
                    scene_id=rec["scene_id"], scene=scene, image=out.image,
                    conditions=out.conditions,
                )
            )
    if not bundles:
        raise PreconditionError(f"dataset at {manifest} is empty")
    return SceneDataset(root=manifest.parent, bundles=bundles, resolution=resolution)


@dataclass(frozen=True)
class DatasetSplits:
    train: list[int]
    val: list[int]
    test: list[int]


def split_dataset(ds: SceneDataset, n_val: int, n_test: int) -> DatasetSplits:
    n = len(ds)
    if n <= n_val + n_test:
        raise ConfigurationError(
            f"dataset of {n} scenes cannot supply {n_val} validation + {n_test} test scenes"
        )
    return DatasetSplits(
        train=list(range(0, n - n_val - n_test)),
        val=list(range(n - n_val - n_test, n - n_test)),
        test=list(range(n - n_test, n)),
    )


@dataclass(frozen=True)
class CorruptionPolicy:
    prob: float = 0.5
    severity_range: tuple[float, float] = (0.2, 0.8)
    modes: tuple[str, ...] = ("gaussian_noise", "block_dropout", "affine_jitter", "swap_scene")


def _corrupt_one(ds, idx, kind, rng, policy) -> ConditionMap:
    mode = policy.modes[int(rng.integers(len(policy.modes)))]
    severity = float(rng.uniform(*policy.severity_range))
    seed = int(rng.integers(2**31))
    donor = None
    spec = CorruptionSpec(mode=mode, severity=severity, seed=seed)
    if mode == "swap_scene":
        donor_idx = int(rng.integers(len(ds) - 1))
        if donor_idx >= idx:
            donor_idx += 1
        spec = CorruptionSpec(mode=mode, severity=severity, seed=seed,
                              donor_scene_id=ds[donor_idx].scene_id)
        donor = ds[donor_idx].conditions[kind]
    return corrupt(ds[idx].conditions[kind], spec, donor=donor)


def make_condition_set(
    ds: SceneDataset,
    idx: int,
    rng: np.random.Generator,
    policy: CorruptionPolicy | None = None,
    kinds: tuple[str, ...] = CONDITION_KINDS,
    duplicate_kinds: tuple[str, ...] = (),
) -> tuple[list[ConditionMap], list[bool]]:
    """One condition per kind, each corrupted with the policy's probability;
    duplicate_kinds additionally append a forced-corrupt copy of those kinds,
    giving the ranking loss direct same-kind clean-vs-corrupt comparisons.

    swap_scene donors come from a different random scene in the dataset.
    """
    policy = policy or CorruptionPolicy()
    bundle = ds[idx]
    conditions = []
    flags = []
    for kind in kinds:
        hit = policy.prob > 0 and rng.random() < policy.prob
        if hit:
            conditions.append(_corrupt_one(ds, idx, kind, rng, policy))
        else:
            conditions.append(bundle.conditions[kind])
        flags.append(hit)
    for kind in duplicate_kinds:
        conditions.append(_corrupt_one(ds, idx, kind, rng, policy))
        flags.append(True)
    return conditions, flags
