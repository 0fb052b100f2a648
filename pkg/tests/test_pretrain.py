import dataclasses

import numpy as np
import pytest

from hicontrast.encoders import EncoderConfig, init_params
from hicontrast.losses import LossConfig
from hicontrast.pretrain import (CheckpointError, TrainConfig, eval_alignment, init_state, load_checkpoint,
                                 run_pretrain, save_checkpoint, sgd_step, train_step)
from hicontrast.records import RecordError
from hicontrast.synth import DatasetSpec, SourceSpec, make_dataset

SMALL = EncoderConfig(dense_hidden=8, dense_out=8, sparse_hidden=8, embed_dim=8)


def _cfg(**kw):
    base = dict(batch_size=4, stage1_epochs=1, stage2_epochs=1, seed=0, encoder=SMALL,
                loss=LossConfig(dense_subsample=16))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_dataset(DatasetSpec(sources=[SourceSpec(10), SourceSpec(4, ("rgb", "keypoints"))], seed=5))


def _arrays(params):
    return {n: params[n].data.copy() for n in params.names()}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(stage1_epochs=0, stage2_epochs=0)


def test_same_config_bit_identical(data):
    a, _, la = run_pretrain(data, _cfg())
    b, _, lb = run_pretrain(data, _cfg())
    for n in a.names():
        assert a[n].data.tobytes() == b[n].data.tobytes()
    assert la.column("total") == lb.column("total")


def test_stage_one_only(data):
    _, _, log = run_pretrain(data, _cfg(stage1_epochs=2, stage2_epochs=0))
    assert set(log.column("stage")) == {1}
    assert all(v is None for v in log.column("loss_d") + log.column("loss_s"))
    assert all(v is not None for v in log.column("loss_g"))


def test_stage_two_uses_every_term(data):
    _, _, log = run_pretrain(data, _cfg())
    stage2 = [r for r in log.records if r["stage"] == 2]
    assert stage2 and all(r["loss_d"] is not None and r["loss_s"] is not None for r in stage2)
    steps = log.column("step")
    assert steps == sorted(steps) and len(set(steps)) == len(steps)
    assert all(np.isfinite(r["total"]) and np.isfinite(r["grad_norm"]) for r in log.records)


def test_global_loss_decreases_on_128_samples():
    ds = make_dataset(DatasetSpec(sources=[SourceSpec(96), SourceSpec(32, ("rgb", "keypoints"))], seed=7))
    cfg = TrainConfig(stage1_epochs=4, stage2_epochs=0, seed=1)
    _, _, log = run_pretrain(ds, cfg)
    lg = log.column("loss_g", stage=1)
    per_epoch = len(lg) // 4
    assert np.mean(lg[-per_epoch:]) < np.mean(lg[:per_epoch])


def test_pool_updates_do_not_touch_gradients(data):
    cfg = _cfg()
    grads = []
    for update in (False, True):
        state = init_state(data, cfg)
        from hicontrast.pretrain import batch_loss
        total, _, emb = batch_loss(state.params, state.pool, data[:4], cfg.loss, np.random.default_rng(0))
        total.backward()
        if update:
            for m, ids in emb.ids.items():
                state.pool.update_many(m, ids, emb.global_[m].data)
        grads.append({n: state.params[n].grad.tobytes() for n in state.params.names()
                      if state.params[n].grad is not None})
    assert grads[0] == grads[1]


def test_sgd_step_moves_against_gradient(data):
    state = init_state(data, _cfg())
    before = _arrays(state.params)
    train_step(state, data[:4], LossConfig(dense_subsample=16), lr=0.1)
    moved = [n for n in state.params.names() if not np.array_equal(before[n], state.params[n].data)]
    assert moved


def test_sgd_rejects_non_finite():
    from hicontrast import tensor as T
    from hicontrast.tensor import TensorError
    t = T.parameter([1.0])
    t.grad = np.array([np.inf])
    with pytest.raises(TensorError):
        sgd_step([t], 0.1)


def test_checkpoint_save_load_save_is_byte_identical(data, tmp_path):
    cfg = _cfg()
    state = init_state(data, cfg)
    run_pretrain(data, cfg, state=state)
    save_checkpoint(state, tmp_path / "a.bin", cfg)
    save_checkpoint(load_checkpoint(tmp_path / "a.bin"), tmp_path / "b.bin", cfg)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_resume_matches_uninterrupted_run(data, tmp_path):
    full_cfg = _cfg(stage1_epochs=1, stage2_epochs=2)
    straight, _, log_a = run_pretrain(data, full_cfg)

    state = init_state(data, full_cfg)
    run_pretrain(data, dataclasses.replace(full_cfg, stage2_epochs=1), state=state)
    save_checkpoint(state, tmp_path / "mid.bin", full_cfg)
    resumed_state = load_checkpoint(tmp_path / "mid.bin")
    resumed, _, _ = run_pretrain(data, full_cfg, state=resumed_state)
    for n in straight.names():
        assert straight[n].data.tobytes() == resumed[n].data.tobytes()
    assert resumed_state.step == log_a.records[-1]["step"]


def test_truncated_and_foreign_checkpoints(data, tmp_path):
    state = init_state(data, _cfg())
    save_checkpoint(state, tmp_path / "c.bin")
    buf = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(buf[: len(buf) // 2])
    with pytest.raises(RecordError):
        load_checkpoint(tmp_path / "t.bin")
    from hicontrast.encoders import save_params
    save_params(state.params, tmp_path / "p.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "p.bin")


def test_untrained_alignment_is_null():
    held = make_dataset(DatasetSpec(sources=[SourceSpec(64)], seed=21))
    m = eval_alignment(init_params(0), held)
    chance = 1 / 64
    assert abs(m["retrieval_top1"] - chance) <= 3 * np.sqrt(chance * (1 - chance) / 64)
    assert abs(m["joint_margin"]) <= 0.05


def test_identical_inputs_give_perfect_retrieval():
    held = make_dataset(DatasetSpec(sources=[SourceSpec(16)], seed=22))
    m = eval_alignment(init_params(0), held, "rgb", "rgb")
    assert m["retrieval_top1"] == 1.0
    # same-joint cosine is 1, the largest possible
    assert m["joint_margin"] > 0


def test_alignment_needs_two_modalities():
    held = make_dataset(DatasetSpec(sources=[SourceSpec(4, ("rgb", "keypoints"))], seed=23))
    with pytest.raises(ValueError):
        eval_alignment(init_params(0), held)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_aborts_on_non_finite(data):
    from hicontrast.pretrain import TrainingAborted
    cfg = _cfg(lr_scale=1e300)
    with pytest.raises(TrainingAborted) as info:
        run_pretrain(data, cfg)
    assert info.value.step >= 0
