import numpy as np
import pytest
import torch

import oracles
from helpers import tiny_model_config, tiny_training_setup
from ovrseg.model import build_model
from ovrseg.registry import IGNORE_INDEX, ClassRegistry
from ovrseg.training import (
    ITER_PRESETS,
    LossRecord,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    bce_loss,
    build_optimizer,
    partition_parameters,
    total_loss,
    train_step,
)


def small_registry(n=3):
    names = tuple(f"class{i}" for i in range(n))
    return ClassRegistry(names=names, seen_flags=tuple(True for _ in names))


def test_train_config_validation():
    TrainConfig()
    with pytest.raises(ValueError):
        TrainConfig(lr_vl=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_iters=0)
    assert set(ITER_PRESETS) == {"isaid", "dlrsd", "oem"}


def test_bce_loss_matches_oracle():
    torch.manual_seed(0)
    logits = torch.randn(5, 5, 3, dtype=torch.float64)
    mask = torch.randint(0, 3, (5, 5))
    mask[0, 0] = IGNORE_INDEX
    mask[4, 4] = IGNORE_INDEX
    got = bce_loss(logits, mask).item()
    want = oracles.bce_loss_oracle(logits.numpy(), mask.numpy())
    assert oracles.rel_err(got, want) < 1e-12


def test_bce_loss_ignored_pixels_do_not_contribute():
    torch.manual_seed(1)
    logits = torch.randn(4, 4, 2, dtype=torch.float64)
    mask = torch.zeros(4, 4, dtype=torch.long)
    mask[2:, :] = IGNORE_INDEX
    base = bce_loss(logits, mask).item()
    # rewriting logits under ignored pixels must not change the loss
    logits2 = logits.clone()
    logits2[2:, :, :] = 1000.0
    assert bce_loss(logits2, mask).item() == base


def test_bce_loss_all_ignored_warns_and_returns_zero():
    logits = torch.randn(2, 2, 3, requires_grad=True)
    mask = torch.full((2, 2), IGNORE_INDEX, dtype=torch.long)
    with pytest.warns(UserWarning):
        loss = bce_loss(logits, mask)
    assert loss.item() == 0.0
    loss.backward()  # still differentiable
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_bce_loss_validation():
    with pytest.raises(ValueError):
        bce_loss(torch.randn(4, 4), torch.zeros(4, 4, dtype=torch.long))
    with pytest.raises(ValueError):
        bce_loss(torch.randn(4, 4, 2), torch.zeros(3, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        bce_loss(torch.randn(2, 2, 2), torch.full((2, 2), 5, dtype=torch.long))
    bad = torch.randn(2, 2, 2)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError):
        bce_loss(bad, torch.zeros(2, 2, dtype=torch.long))


def test_total_loss_weights():
    bce = torch.tensor(2.0)
    sem = torch.tensor(3.0)
    assert total_loss(bce, sem).item() == 5.0
    assert total_loss(bce, sem, bce_weight=0.5, sem_weight=2.0).item() == 7.0


def test_partition_covers_every_parameter_once():
    model = build_model(tiny_model_config(seed=0), small_registry())
    part = partition_parameters(model)
    all_names = [n for n, _ in model.named_parameters()]
    partitioned = part.names("vl_qv") + part.names("main") + part.names("frozen")
    assert sorted(partitioned) == sorted(all_names)
    assert part.total == len(all_names)
    assert len(set(partitioned)) == len(partitioned)


def test_partition_group_membership():
    model = build_model(tiny_model_config(seed=0), small_registry())
    part = partition_parameters(model)
    for name in part.names("vl_qv"):
        scope, sub = name.split(".", 1)
        assert scope in ("vision_encoder", "text_encoder")
        assert sub.startswith(("head.q_proj", "head.v_proj"))
    for name in part.names("frozen"):
        assert name.split(".", 1)[0] in ("vision_encoder", "text_encoder", "guidance_encoder")
    for name in part.names("main"):
        assert name.split(".", 1)[0] in ("fusion", "refinement", "back_projection", "decoder")
    # every vl_qv parameter is trainable, every frozen one is not
    assert all(p.requires_grad for _, p in part.vl_qv)
    assert all(not p.requires_grad for _, p in part.frozen)


def test_partition_rejects_undeclared_trainable_vl_parameter():
    model = build_model(tiny_model_config(seed=0), small_registry())
    model.vision_encoder.head.k_proj.requires_grad_(True)
    with pytest.raises(ValueError, match="FINETUNE_QV_PREFIXES"):
        partition_parameters(model)


def test_build_optimizer_rates_and_decay_policy():
    model = build_model(tiny_model_config(seed=0), small_registry())
    part = partition_parameters(model)
    config = TrainConfig(lr_vl=1e-6, lr_other=1e-3, weight_decay=0.05)
    opt = build_optimizer(part, config)
    lrs = sorted({g["lr"] for g in opt.param_groups})
    assert lrs == [1e-6, 1e-3]
    frozen_ids = {id(p) for _, p in part.frozen}
    opt_ids = {id(p) for g in opt.param_groups for p in g["params"]}
    assert not (frozen_ids & opt_ids)
    assert opt_ids == {id(p) for _, p in part.vl_qv} | {id(p) for _, p in part.main}
    for g in opt.param_groups:
        if g["weight_decay"] > 0:
            assert all(p.ndim > 1 for p in g["params"])
        else:
            assert g["weight_decay"] == 0.0


def test_loss_record_line_round_trips_floats():
    rec = LossRecord(iteration=7, bce=1.0 / 3.0, sem=2.0 / 7.0, total=1.0 / 3.0 + 2.0 / 7.0)
    line = rec.as_line()
    parts = line.split(",")
    assert parts[0] == "7"
    assert float(parts[1]) == rec.bce
    assert float(parts[2]) == rec.sem
    assert float(parts[3]) == rec.total


def test_train_step_rejects_empty_batch():
    setup = tiny_training_setup(seed=0)
    with pytest.raises(ValueError):
        train_step([], setup.model, setup.trainer.optimizer, setup.trainer.config)


def test_trainer_shuffling_is_seeded_and_exhaustive():
    setup_a = tiny_training_setup(seed=3)
    setup_b = tiny_training_setup(seed=3)
    batches_a = [setup_a.trainer.next_batch() for _ in range(3)]
    batches_b = [setup_b.trainer.next_batch() for _ in range(3)]
    for ba, bb in zip(batches_a, batches_b):
        for (ia, ma), (ib, mb) in zip(ba, bb):
            assert torch.equal(ia, ib)
            assert torch.equal(ma, mb)
    # one epoch of batch_size 4 over 4 samples covers every sample exactly once
    ids = {id(img) for img, _ in batches_a[0]}
    assert len(ids) == 4


def test_trainer_steps_record_losses_and_update_parameters():
    torch.manual_seed(0)
    setup = tiny_training_setup(seed=0)
    trainer = setup.trainer
    before = {n: p.detach().clone() for n, p in trainer.partition.main}
    records = trainer.run(2)
    assert [r.iteration for r in records] == [1, 2]
    assert all(np.isfinite([r.bce, r.sem, r.total]).all() for r in records)
    assert all(r.total == pytest.approx(r.bce + r.sem, rel=1e-6) for r in records)
    changed = sum(
        0 if torch.equal(before[n], p.detach()) else 1 for n, p in trainer.partition.main
    )
    assert changed > 0


def test_trainer_requires_samples():
    setup = tiny_training_setup(seed=0)
    with pytest.raises(ValueError):
        Trainer(setup.model, [], TrainConfig())
