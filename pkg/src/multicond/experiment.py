"""Experiment manifest: config hash, dataset path, checkpoint lineage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import CheckpointError

MANIFEST_FILE = "experiment.json"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ExperimentManifest:
    experiment_id: str
    config: dict
    dataset: str
    seed: int
    lineage: dict = field(default_factory=dict)  # {"stage0": path, ...}
    created: str = ""
    tool_version: str = __version__

    def save(self, root: str | Path) -> Path:
        path = Path(root) / MANIFEST_FILE
        payload = {
            "experiment_id": self.experiment_id,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "dataset": self.dataset,
            "seed": self.seed,
            "lineage": self.lineage,
            "created": self.created or datetime.now(timezone.utc).isoformat(),
            "tool_version": self.tool_version,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        return path

    @staticmethod
    def load(root: str | Path) -> "ExperimentManifest":
        path = Path(root)
        if path.is_dir():
            path = path / MANIFEST_FILE
        if not path.exists():
            raise CheckpointError(f"no experiment manifest at {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"experiment manifest at {path} is not valid JSON") from exc
        if config_hash(payload["config"]) != payload.get("config_hash"):
            raise CheckpointError(f"experiment manifest at {path} failed its config-hash check")
        return ExperimentManifest(
            experiment_id=payload["experiment_id"],
            config=payload["config"],
            dataset=payload["dataset"],
            seed=payload["seed"],
            lineage=payload["lineage"],
            created=payload["created"],
            tool_version=payload["tool_version"],
        )
