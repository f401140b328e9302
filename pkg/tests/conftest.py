"""Shared fixtures: a tiny dataset and tiny trained stages reused across
test modules.  The acceptance suite builds its own, larger artifacts."""

import numpy as np
import pytest
import torch

from multicond.adapter import AdapterConfig
from multicond.dataset import write_dataset
from multicond.evaluator import EvaluatorConfig
from multicond.training import StageConfig, SystemConfig, run_stage
from multicond.unet import DenoiserConfig

torch.set_num_threads(max(1, torch.get_num_threads()))


def tiny_system() -> SystemConfig:
    return SystemConfig(
        resolution=16,
        denoiser=DenoiserConfig(resolution=16, channels=(8, 16), ctx_dim=16, temb_dim=32,
                                attn_heads=2),
        evaluator=EvaluatorConfig(resolution=16, width=32, layers=1, heads=2, num_queries=2,
                                  embed_dim=16, resampler_layers=1),
        adapter=AdapterConfig(feat_dim=16, blocks=1, embed_dim=16, heads=2),
        timesteps=100,
        ddim_steps=50,
        n_val=4,
        n_test=6,
        validate_every=10,
        val_subset=2,
        val_ddim_steps=4,
    )


@pytest.fixture(scope="session")
def tiny_sys():
    return tiny_system()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    write_dataset(root, n_scenes=40, seed=100, resolution=16)
    return root


@pytest.fixture(scope="session")
def tiny_stage0(tmp_path_factory, tiny_data, tiny_sys):
    out = tmp_path_factory.mktemp("tiny_s0")
    return run_stage(StageConfig(stage=0, steps=30, batch=8, seed=5), tiny_data, out,
                     system=tiny_sys)


@pytest.fixture(scope="session")
def tiny_stage1(tmp_path_factory, tiny_data, tiny_stage0):
    out = tmp_path_factory.mktemp("tiny_s1")
    return run_stage(StageConfig(stage=1, steps=20, batch=4, seed=5), tiny_data, out,
                     prior={0: tiny_stage0.final_ckpt})


@pytest.fixture(scope="session")
def tiny_stage2(tmp_path_factory, tiny_data, tiny_stage1):
    out = tmp_path_factory.mktemp("tiny_s2")
    return run_stage(StageConfig(stage=2, steps=20, batch=4, seed=5), tiny_data, out,
                     prior={1: tiny_stage1.final_ckpt})
