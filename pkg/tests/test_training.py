"""Stage losses, run-loop contracts, determinism, checkpoint round-trips."""

import json

import numpy as np
import pytest
import torch

from multicond.dataset import load_dataset, split_dataset
from multicond.errors import ConfigurationError, ContractError, PreconditionError, TrainingDiverged
from multicond import training as tr
from multicond.training import (
    LossMask,
    StageConfig,
    build_stage1_batch,
    build_stage2_batch,
    compose_stage1_total,
    load_stage_checkpoint,
    run_stage,
    stage1_loss,
    stage2_loss,
)


def test_stage_config_defaults_honored():
    cfg = StageConfig(stage=1).resolved()
    assert cfg.lambda1 == 2.0
    assert cfg.lambda2 == 1.5
    assert cfg.lr == 2e-4
    assert cfg.steps == 2000
    assert StageConfig(stage=0).resolved().steps == 3000
    assert StageConfig(stage=2).resolved().steps == 5000
    assert cfg.weight_decay == 0.0
    assert cfg.warmup_ratio == 0.001


def test_stage_config_validation():
    with pytest.raises(ConfigurationError):
        StageConfig(stage=3).resolved()
    with pytest.raises(ConfigurationError):
        StageConfig(stage=1, lr=-1.0).resolved()
    with pytest.raises(ConfigurationError):
        StageConfig(stage=1, lambda1=-0.5).resolved()


def test_compose_total_hand_arithmetic():
    # components (0.2, 0.3, 0.1, 0.4) with lambdas (2, 1.5) -> 1.3
    assert compose_stage1_total(0.2, 0.3, 0.1, 0.4, 2.0, 1.5) == pytest.approx(1.3, abs=1e-12)
    assert compose_stage1_total(0.0, 0.0, 0.0, 0.0) == 0.0


def test_compose_total_lambda_linearity():
    vals = (0.213, 0.377, 0.591, 0.733)
    delta = 0.37
    a = compose_stage1_total(*vals, 2.0, 1.5)
    b = compose_stage1_total(*vals, 2.0 + delta, 1.5)
    assert b - a == pytest.approx(delta * vals[2], abs=1e-9)


@pytest.fixture(scope="module")
def stage1_models(tiny_stage1):
    models, _ = load_stage_checkpoint(tiny_stage1.final_ckpt, 1)
    return models


@pytest.fixture(scope="module")
def stage2_models(tiny_stage2):
    models, _ = load_stage_checkpoint(tiny_stage2.final_ckpt, 2)
    return models


def _stage1_batch(models, ds, seed=3, batch=2):
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    idxs = list(range(batch))
    return build_stage1_batch(ds, idxs, rng, gen, models.system, models.sched)


def test_stage1_loss_composition_and_determinism(stage1_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage1_batch(stage1_models, ds)
    total_a, comps_a = stage1_loss(batch, stage1_models, stage1_models.sched, 2.0, 1.5,
                                   joint=False)
    total_b, comps_b = stage1_loss(batch, stage1_models, stage1_models.sched, 2.0, 1.5,
                                   joint=False)
    assert comps_a == comps_b
    expected = compose_stage1_total(comps_a["l_condition"], comps_a["l_image"],
                                    comps_a["l_llm"], comps_a["l_eval"], 2.0, 1.5)
    assert float(total_a) == pytest.approx(expected, abs=1e-6)
    assert float(total_a) == pytest.approx(float(total_b), abs=1e-12)


def test_stage1_loss_lambda_linearity_through_op(stage1_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage1_batch(stage1_models, ds)
    delta = 0.73
    t1, c1 = stage1_loss(batch, stage1_models, stage1_models.sched, 2.0, 1.5, joint=False)
    t2, c2 = stage1_loss(batch, stage1_models, stage1_models.sched, 2.0 + delta, 1.5,
                         joint=False)
    assert c1["l_llm"] == c2["l_llm"]
    assert float(t2) - float(t1) == pytest.approx(delta * c1["l_llm"], abs=1e-9)


def test_stage1_loss_lambda2_zero_detaches_eval_path(stage1_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage1_batch(stage1_models, ds)
    stage1_models.evaluator.zero_grad(set_to_none=True)
    total, _ = stage1_loss(batch, stage1_models, stage1_models.sched, lambda1=2.0, lambda2=0.0,
                           mask=LossMask(eval=False), joint=False)
    total.backward()
    g = stage1_models.evaluator.score_head.weight.grad
    assert g is None or float(g.abs().max()) == 0.0
    stage1_models.evaluator.zero_grad(set_to_none=True)


class _OracleDenoiser(torch.nn.Module):
    """Returns the exact noise of the batch (loss must be 0)."""

    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, x, t, ctx, controls=None):
        return self.eps


class _ZeroDenoiser(torch.nn.Module):
    def forward(self, x, t, ctx, controls=None):
        return torch.zeros_like(x)


def _stage2_batch(models, ds, seed=4, batch=4):
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    idxs = list(range(batch))
    return build_stage2_batch(ds, idxs, rng, gen, models.system, models.sched)


def test_stage2_loss_oracle_zero(stage2_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage2_batch(stage2_models, ds)
    real = stage2_models.control_model
    stage2_models.control_model = _OracleDenoiser(batch.eps)
    try:
        loss = stage2_loss(batch, stage2_models, stage2_models.sched)
    finally:
        stage2_models.control_model = real
    assert float(loss) == 0.0


def test_stage2_loss_zero_model_chi_square(stage2_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage2_batch(stage2_models, ds, batch=6)
    real = stage2_models.control_model
    stage2_models.control_model = _ZeroDenoiser()
    try:
        loss = float(stage2_loss(batch, stage2_models, stage2_models.sched))
    finally:
        stage2_models.control_model = real
    n = batch.eps.numel()
    assert abs(loss - 1.0) <= 3.0 * (2.0 / n) ** 0.5


def test_stage2_requires_frozen_evaluator(stage2_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage2_batch(stage2_models, ds)
    for p in stage2_models.evaluator.parameters():
        p.requires_grad_(True)
    try:
        with pytest.raises(ContractError):
            stage2_loss(batch, stage2_models, stage2_models.sched)
    finally:
        stage2_models.evaluator.freeze()


def test_stage2_step_leaves_evaluator_untouched(stage2_models, tiny_data):
    ds = load_dataset(tiny_data)
    batch = _stage2_batch(stage2_models, ds)
    before = [p.detach().clone() for p in stage2_models.evaluator.parameters()]
    params = [p for p in stage2_models.control_model.parameters()] + [
        p for p in stage2_models.adapter.parameters()
    ]
    opt = torch.optim.AdamW(params, lr=1e-3)
    loss = stage2_loss(batch, stage2_models, stage2_models.sched)
    opt.zero_grad()
    loss.backward()
    opt.step()
    deltas = [
        float((a - b).abs().max())
        for a, b in zip(before, stage2_models.evaluator.parameters())
    ]
    assert max(deltas) == 0.0
    assert all(p.grad is None for p in stage2_models.evaluator.parameters())


def test_run_stage_zero_steps_emits_initial_checkpoint(tmp_path, tiny_data, tiny_sys):
    res = run_stage(StageConfig(stage=0, steps=0, batch=4, seed=9), tiny_data,
                    tmp_path / "zero", system=tiny_sys)
    assert res.final_ckpt.name == "stage0-step0.ckpt"
    assert res.final_ckpt.exists()
    lines = res.metrics_path.read_text().splitlines()
    assert len(lines) == 1  # header only
    assert json.loads(lines[0])["log"] == "multicond-metrics"


def test_run_stage_missing_prerequisites(tmp_path, tiny_data):
    with pytest.raises(PreconditionError, match="stage 1"):
        run_stage(StageConfig(stage=2, steps=1, batch=2, seed=0), tiny_data, tmp_path / "x")
    with pytest.raises(PreconditionError, match="stage 0"):
        run_stage(StageConfig(stage=1, steps=1, batch=2, seed=0), tiny_data, tmp_path / "y")
    with pytest.raises(PreconditionError):
        run_stage(StageConfig(stage=0, steps=1, batch=2, seed=0), tmp_path / "nodata",
                  tmp_path / "z")


def test_run_stage_deterministic_replay(tmp_path, tiny_data, tiny_sys):
    a = run_stage(StageConfig(stage=0, steps=12, batch=4, seed=21), tiny_data,
                  tmp_path / "a", system=tiny_sys)
    b = run_stage(StageConfig(stage=0, steps=12, batch=4, seed=21), tiny_data,
                  tmp_path / "b", system=tiny_sys)

    def losses(path):
        out = []
        for line in path.read_text().splitlines()[1:]:
            rec = json.loads(line)
            if rec["metric"] == "loss":
                out.append(rec["value"])
        return out

    la, lb = losses(a.metrics_path), losses(b.metrics_path)
    assert la and la == pytest.approx(lb, abs=1e-6)
    assert a.final_metrics == pytest.approx(b.final_metrics, abs=1e-6)


def test_run_stage_resume_round_trip(tmp_path, tiny_data, tiny_sys):
    import dataclasses

    sys_ckpt = dataclasses.replace(tiny_sys, checkpoint_every=5)
    full = run_stage(StageConfig(stage=0, steps=10, batch=4, seed=33), tiny_data,
                     tmp_path / "full", system=sys_ckpt)
    mid = tmp_path / "full" / "stage0-step5.ckpt"
    assert mid.exists()
    resumed = run_stage(StageConfig(stage=0, steps=10, batch=4, seed=33), tiny_data,
                        tmp_path / "resumed", system=sys_ckpt, resume_from=mid)

    full_models, _ = load_stage_checkpoint(full.final_ckpt, 0)
    res_models, _ = load_stage_checkpoint(resumed.final_ckpt, 0)
    for (na, pa), (nb, pb) in zip(
        full_models.bundle.denoiser.named_parameters(),
        res_models.bundle.denoiser.named_parameters(),
    ):
        assert na == nb
        assert float((pa - pb).abs().max()) < 1e-6, na


def test_run_stage_nan_aborts_with_snapshot(tmp_path, tiny_data, tiny_sys, monkeypatch):
    def poisoned(batch, models, sched):
        return torch.tensor(float("nan"), requires_grad=True), {}

    monkeypatch.setattr(tr, "stage0_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        run_stage(StageConfig(stage=0, steps=5, batch=4, seed=1), tiny_data,
                  tmp_path / "nan", system=tiny_sys)
    assert (tmp_path / "nan" / "stage0-diverged.ckpt").exists()


def test_stage1_metrics_log_contains_components(tiny_stage1):
    lines = [json.loads(l) for l in tiny_stage1.metrics_path.read_text().splitlines()[1:]]
    val_metrics = {l["metric"] for l in lines if l["split"] == "val"}
    assert {"l_condition", "l_image", "l_llm", "l_eval", "spearman"} <= val_metrics


def test_checkpoint_config_mismatch_rejected(tiny_stage0):
    from multicond.checkpoint import load_checkpoint
    from multicond.errors import CheckpointError

    with pytest.raises(CheckpointError):
        load_checkpoint(tiny_stage0.final_ckpt, expected_kind="stage1")
    with pytest.raises(CheckpointError):
        load_checkpoint(tiny_stage0.final_ckpt, expected_kind="stage0",
                        expected_config={"resolution": 64})


def test_checkpoint_corrupt_file_rejected(tmp_path):
    from multicond.checkpoint import load_checkpoint
    from multicond.errors import CheckpointError

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_evaluator_checkpoint_carries_vocab(tiny_stage1):
    from multicond.checkpoint import load_checkpoint
    from multicond import vocab

    payload = load_checkpoint(tiny_stage1.final_ckpt, expected_kind="stage1")
    assert payload["extra"]["vocab"] == vocab.VOCAB
