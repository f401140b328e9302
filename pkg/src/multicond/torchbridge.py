"""numpy <-> torch conversions for scenes and condition maps."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .scenes import ConditionMap, NUM_SEG_CLASSES
from .errors import ContractError

CONDITION_CHANNELS = {"edge": 1, "softedge": 1, "seg": NUM_SEG_CLASSES, "luma": 1}


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 float [0,1] -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (B, 3, H, W) tensor -> H x W x 3 numpy in [0,1]."""
    if x.dim() == 4:
        x = x[0]
    return x.detach().clamp(0.0, 1.0).permute(1, 2, 0).numpy().astype(np.float64)


def condition_to_tensor(cond: ConditionMap) -> torch.Tensor:
    """Expert-bank input encoding: (C, H, W); seg maps one-hot over 9 classes."""
    if cond.kind == "seg":
        ids = torch.from_numpy(np.ascontiguousarray(cond.data)).long()
        return F.one_hot(ids, NUM_SEG_CLASSES).permute(2, 0, 1).float()
    return torch.from_numpy(np.ascontiguousarray(cond.data)).float().unsqueeze(0)


def condition_to_flat(cond: ConditionMap) -> torch.Tensor:
    """Kind-agnostic (H, W) float view in [0,1]; seg ids are scaled by 1/(K-1)."""
    if cond.kind == "seg":
        return torch.from_numpy(np.ascontiguousarray(cond.data)).float() / (NUM_SEG_CLASSES - 1)
    return torch.from_numpy(np.ascontiguousarray(cond.data)).float()


def batch_images(images: list[np.ndarray]) -> torch.Tensor:
    return torch.stack([image_to_tensor(im) for im in images])


def batch_conditions(conds: list[ConditionMap]) -> torch.Tensor:
    kinds = {c.kind for c in conds}
    if len(kinds) != 1:
        raise ContractError(f"cannot batch mixed kinds {kinds}")
    return torch.stack([condition_to_tensor(c) for c in conds])
