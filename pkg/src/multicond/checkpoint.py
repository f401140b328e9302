"""Single-file checkpoint archive: version tag, config echo, named parameter
blobs.  Loading refuses mismatched configs and flags corrupt files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = "multicond-ckpt-1"


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    modules: dict[str, torch.nn.Module],
    extra: dict | None = None,
) -> None:
    """Atomic write (temp file + rename) of all module state dicts."""
    payload = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state": {name: m.state_dict() for name, m in modules.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(
    path: str | Path,
    expected_kind: str | None = None,
    expected_config: dict | None = None,
) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a {FORMAT_VERSION} archive")
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise CheckpointError(f"expected kind {expected_kind!r}, found {payload['kind']!r}")
    if expected_config is not None:
        for key, want in expected_config.items():
            have = payload["config"].get(key)
            if have != want:
                raise CheckpointError(f"config mismatch on {key!r}: checkpoint {have!r} != {want!r}")
    return payload


def restore(payload: dict, modules: dict[str, torch.nn.Module]) -> None:
    for name, module in modules.items():
        if name not in payload["state"]:
            raise CheckpointError(f"checkpoint lacks state for module {name!r}")
        module.load_state_dict(payload["state"][name])
