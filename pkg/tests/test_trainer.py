import math
import time

import numpy as np
import pytest
import torch

from kpbank.errors import CheckpointError, ContractError, NumericError
from kpbank.synthetic import GeneratorConfig, generate_split
from kpbank.trainer import (TrainConfig, clip_gradients, fit, init_state, load_checkpoint, optimizer_step,
                            save_checkpoint, split_validation, train_step)

TINY_LAYERS = ((8, 3, 2, 1), (8, 3, 2, 1))


def tiny_config(**kw):
    base = dict(layers=TINY_LAYERS, dim=8, group_size=4, num_groups=4, batch_size=4, epochs=2,
                max_grad_norm=1.0, clutter_loss_weight=0.05, val_fraction=0.0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate_split(GeneratorConfig(seed=1), 12, "t")


def params_copy(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


# -- optimizer ---------------------------------------------------------------

def test_lr_zero_keeps_params():
    p = {"w": torch.tensor([1.0, 2.0])}
    optimizer_step(p, {"w": torch.tensor([5.0, -1.0])}, 0.0, {}, 0.9)
    assert p["w"].tolist() == [1.0, 2.0]


def test_zero_momentum_is_gradient_descent():
    p = {"w": torch.tensor([1.0, 2.0], dtype=torch.float64)}
    optimizer_step(p, {"w": torch.tensor([0.5, -1.0], dtype=torch.float64)}, 0.1, {}, 0.0)
    assert p["w"].tolist() == pytest.approx([0.95, 2.1], abs=1e-15)


def test_two_momentum_steps_match_recurrence():
    w, buf, mu, lr = 1.0, 0.0, 0.9, 0.1
    grads = [0.3, -0.7]
    for g in grads:
        buf = mu * buf + g
        w = w - lr * buf
    p, buffers = {"w": torch.tensor([1.0], dtype=torch.float64)}, {}
    for g in grads:
        optimizer_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, lr, buffers, mu)
    assert float(p["w"]) == pytest.approx(w, abs=1e-15)
    assert float(buffers["w"]) == pytest.approx(mu * 0.3 - 0.7, abs=1e-15)


def test_shape_mismatch():
    with pytest.raises(ContractError):
        optimizer_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.1, {}, 0.9)


def test_clip_gradients():
    grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
    assert [float(grads["a"]), float(grads["b"])] == pytest.approx([0.6, 0.8])
    small = {"a": torch.tensor([0.1])}
    clip_gradients(small, 1.0)
    assert float(small["a"]) == pytest.approx(0.1)


# -- steps -------------------------------------------------------------------

def test_frozen_step_only_rotates_clutter(scenes):
    cfg = tiny_config(alpha=1.0, learning_rate=0.0)
    state = init_state(scenes, cfg)
    before, protos = params_copy(state.model), state.kp_bank.prototypes.copy()
    tags = state.clutter_bank.tags.copy()
    train_step(state, scenes[:4], cfg, np.random.default_rng(0))
    for k, v in state.model.named_parameters():
        assert torch.equal(v, before[k])
    np.testing.assert_array_equal(state.kp_bank.prototypes, protos)
    assert not np.array_equal(state.clutter_bank.tags, tags)


def test_descent_on_fixed_batch(scenes):
    cfg = tiny_config(learning_rate=0.002, momentum=0.0, dtype="float64")
    state = init_state(scenes, cfg)
    batch = scenes[:4]
    losses = [float(train_step(state, batch, cfg, np.random.default_rng(1)).total) for _ in range(10)]
    for a, b in zip(losses, losses[1:]):
        assert b <= a + 0.05 * abs(a)
    assert losses[-1] < losses[0]


def test_bitwise_determinism(scenes):
    def run():
        cfg = tiny_config()
        state = init_state(scenes, cfg)
        rng = np.random.default_rng(3)
        return [float(train_step(state, scenes[i:i + 4], cfg, rng).total) for i in (0, 4, 8)]
    assert run() == run()


def test_nan_aborts_with_batch_id(scenes):
    cfg = tiny_config()
    state = init_state(scenes, cfg)
    with torch.no_grad():
        state.model.reduce.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="batch b7"):
        train_step(state, scenes[:4], cfg, np.random.default_rng(0), batch_id="b7")


def test_prototype_drift_bounded(scenes):
    cfg = tiny_config(alpha=0.5)
    state = init_state(scenes, cfg)
    rng = np.random.default_rng(0)
    for i in range(3):
        before = state.kp_bank.prototypes.copy()
        train_step(state, scenes[4 * i:4 * i + 4], cfg, rng)
        cos = np.sum(before * state.kp_bank.prototypes, axis=1)
        assert np.all(cos >= -1e-12)  # angle <= 90 degrees


def test_rows_stay_unit_during_training(scenes):
    cfg = tiny_config()
    state = init_state(scenes, cfg)
    rng = np.random.default_rng(0)
    for i in range(6):
        train_step(state, scenes[(4 * i) % 12:(4 * i) % 12 + 4], cfg, rng)
        assert np.all(np.abs(np.linalg.norm(state.kp_bank.prototypes, axis=1) - 1) < 1e-6)
        assert np.all(np.abs(np.linalg.norm(state.clutter_bank.vectors(), axis=1) - 1) < 1e-6)


@pytest.mark.parametrize("mode", ["image", "none"])
def test_other_clutter_modes_run(scenes, mode):
    cfg = tiny_config(clutter_mode=mode)
    state = init_state(scenes, cfg)
    assert len(state.clutter_bank) == 0
    out = train_step(state, scenes[:4], cfg, np.random.default_rng(0))
    assert math.isfinite(float(out.total))
    assert (len(out.clutter_terms) == 0) == (mode == "none")


# -- fit and checkpoints -----------------------------------------------------

def test_validation_split_deterministic(scenes):
    cfg = tiny_config(val_fraction=0.25)
    a, b = split_validation(scenes, cfg), split_validation(scenes, cfg)
    assert [s.scene_id for s in a[1]] == [s.scene_id for s in b[1]] and len(a[1]) == 3


def test_zero_epochs_checkpoint_is_init(scenes, tmp_path):
    cfg = tiny_config(epochs=0)
    state, metrics = fit(scenes, cfg, run_dir=tmp_path)
    fresh = init_state(scenes, cfg)
    loaded = load_checkpoint(tmp_path / "checkpoint_final.pt")
    assert metrics == []
    for (k, v), (_, w) in zip(loaded.model.state_dict().items(), fresh.model.state_dict().items()):
        assert torch.equal(v, w), k
    np.testing.assert_array_equal(loaded.kp_bank.prototypes, fresh.kp_bank.prototypes)


def test_checkpoint_round_trip(scenes, tmp_path):
    cfg = tiny_config()
    state = init_state(scenes, cfg)
    train_step(state, scenes[:4], cfg, np.random.default_rng(0))
    save_checkpoint(state, cfg, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt", expected_stride=4)
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, back.model.state_dict()[k])
    for k, v in state.buffers.items():
        assert torch.equal(v, back.buffers[k])
    np.testing.assert_array_equal(state.kp_bank.prototypes, back.kp_bank.prototypes)
    np.testing.assert_array_equal(state.clutter_bank.groups, back.clutter_bank.groups)
    np.testing.assert_array_equal(state.clutter_bank.tags, back.clutter_bank.tags)
    assert (back.kp_bank.alpha, back.clutter_bank.next_tag, back.step) == (0.9, state.clutter_bank.next_tag, 1)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.pt", expected_stride=8)


def test_bad_checkpoint(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_resume_matches_uninterrupted(scenes, tmp_path):
    cfg = tiny_config(epochs=3, checkpoint_interval=1)
    _, full = fit(scenes, cfg, run_dir=tmp_path / "a")
    _, tail = fit(scenes, cfg, run_dir=tmp_path / "b", resume_from=tmp_path / "a" / "checkpoint_epoch0001.pt")
    assert [m["mean_loss"] for m in full[1:]] == [m["mean_loss"] for m in tail]


def test_tiny_run_is_fast(tmp_path):
    data = generate_split(GeneratorConfig(seed=1), 20, "t")
    cfg = TrainConfig(epochs=2, max_grad_norm=1.0, clutter_loss_weight=0.05, val_fraction=0.1)
    t0 = time.perf_counter()
    _, metrics = fit(data, cfg, run_dir=tmp_path)
    assert time.perf_counter() - t0 < 60
    assert len(metrics) == 2 and "val_pck" in metrics[0]
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 2
