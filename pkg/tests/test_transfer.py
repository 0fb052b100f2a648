import dataclasses
import itertools

import numpy as np
import pytest

from hicontrast import tensor as T
from hicontrast.encoders import EncoderConfig
from hicontrast.synth import DatasetSpec, SourceSpec, make_dataset, subsample
from hicontrast.transfer import (ContaminationError, TransferConfig, TransferError, cross_modality_supervision,
                                 eval_parsing, finetune_parsing, missing_modality, pixel_cross_entropy)

SMALL = EncoderConfig(dense_hidden=8, dense_out=8, sparse_hidden=8, embed_dim=8)


def _cfg(**kw):
    base = dict(steps=4, batch_size=2, seed=0, encoder=SMALL)
    base.update(kw)
    return TransferConfig(**base)


@pytest.fixture(scope="module")
def data():
    ds = make_dataset(DatasetSpec(sources=[SourceSpec(12)], seed=31))
    return ds[:8], ds[8:]


def _strip(s, m):
    mask = dict(s.modality_mask)
    mask[m] = False
    return dataclasses.replace(s, modality_mask=mask, **{m: None})


# --- metrics --------------------------------------------------------------

def test_perfect_prediction():
    y = np.array([[0, 1], [2, 2]])
    m = eval_parsing(y, y, 3)
    assert m.miou == m.macc == m.aacc == 1.0


def test_all_background_prediction():
    y = np.array([[0, 1], [2, 2]])
    m = eval_parsing(np.zeros_like(y), y, 3)
    assert m.per_class_iou[1] == 0.0 and m.per_class_iou[2] == 0.0
    assert m.aacc == 0.25


def test_hand_enumerated_two_class_fixture():
    true = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])  # one background pixel confused
    # confusion: class0 TP=1 FN=1 FP=0; class1 TP=2 FP=1 FN=0
    m = eval_parsing(pred, true, 2)
    assert m.per_class_iou == pytest.approx([1 / 2, 2 / 3])
    assert m.miou == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert m.macc == pytest.approx((1 / 2 + 1) / 2)
    assert m.aacc == pytest.approx(3 / 4)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        true = rng.integers(0, k, size=(3, 5, 5))
        pred = rng.integers(0, k, size=(3, 5, 5))
        m = eval_parsing(pred, true, k)
        ious, recalls = [], []
        for c in range(k):
            tp = sum(1 for p, t in zip(pred.ravel(), true.ravel()) if p == c and t == c)
            fp = sum(1 for p, t in zip(pred.ravel(), true.ravel()) if p == c and t != c)
            fn = sum(1 for p, t in zip(pred.ravel(), true.ravel()) if p != c and t == c)
            if tp + fn:
                ious.append(tp / (tp + fp + fn))
                recalls.append(tp / (tp + fn))
        assert m.miou == pytest.approx(np.mean(ious), abs=1e-15)
        assert m.macc == pytest.approx(np.mean(recalls), abs=1e-15)
        assert m.aacc == pytest.approx(np.mean(pred == true), abs=1e-15)
        assert 0 <= m.miou <= 1 and 0 <= m.macc <= 1


def test_metric_errors():
    with pytest.raises(TransferError):
        eval_parsing(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(TransferError):
        eval_parsing(np.array([[0, 2]]), np.array([[0, 1]]), 2)


def test_pixel_cross_entropy_value():
    logits = np.log(np.array([[[[0.7, 0.2, 0.1]]]]))
    got = pixel_cross_entropy(T.constant(logits), np.array([[[1]]])).item()
    assert got == pytest.approx(-np.log(0.2), abs=1e-12)


# --- fine-tuning ----------------------------------------------------------

def test_fraction_uses_stride_rule(data):
    train, test = data
    _, _, log = finetune_parsing("rgb", train, test, _cfg(steps=1, batch_size=100), fraction=0.5)
    assert [s.sample_id for s in subsample(train, 0.5)] == [train[i].sample_id for i in (0, 2, 4, 6)]
    with pytest.raises(Exception):
        finetune_parsing("rgb", train[:2], test, _cfg(), fraction=0.1)


def test_single_sample_memorisation(data):
    train, test = data
    cfg = TransferConfig(steps=1000, batch_size=1, seed=0, lr_scale=30.0)
    _, _, log = finetune_parsing("rgb", train[:1], test, cfg)
    assert log.records[-1]["loss_task"] < 0.05


def test_finetune_is_deterministic(data):
    train, test = data
    a = finetune_parsing("depth", train, test, _cfg())
    b = finetune_parsing("depth", train, test, _cfg())
    assert a[1] == b[1]
    assert [r["total"] for r in a[2].records] == [r["total"] for r in b[2].records]


def test_frozen_backbone_leaves_encoder_unchanged(data):
    train, test = data
    from hicontrast.encoders import init_params
    params = init_params(0, SMALL)
    model, _, _ = finetune_parsing("rgb", train, test, _cfg(freeze_backbone=True), params=params)
    assert all(np.array_equal(model.params[n].data, params[n].data) for n in params.names())


def test_rejects_non_dense_modality(data):
    with pytest.raises(TransferError):
        finetune_parsing("keypoints", *data, _cfg())


# --- cross-modality supervision -------------------------------------------

def test_contamination_guard(data):
    train, test = data
    with pytest.raises(ContaminationError):
        cross_modality_supervision("rgb", "depth", train[:4], train[4:], test, _cfg())


def test_target_labels_are_never_read(data):
    train, test = data
    labelled = [_strip(s, "depth") for s in train[:4]]
    # relabel every body part; background stays background
    perm = np.concatenate([[0], 1 + np.random.default_rng(0).permutation(12)])
    tripwire = [dataclasses.replace(s, part_labels=perm[s.part_labels]) for s in train[4:]]
    a = cross_modality_supervision("rgb", "depth", labelled, train[4:], test, _cfg())
    b = cross_modality_supervision("rgb", "depth", labelled, tripwire, test, _cfg())
    assert a[1] == b[1]
    assert [r["total"] for r in a[2].records] == [r["total"] for r in b[2].records]


def test_source_equals_target_is_plain_finetune(data):
    train, test = data
    a = cross_modality_supervision("rgb", "rgb", train, train, test, _cfg())
    b = finetune_parsing("rgb", train, test, _cfg())
    assert a[1] == b[1]


@pytest.mark.parametrize("mode", ["full", "global", "off"])
def test_contrastive_modes_run(data, mode):
    train, test = data
    labelled = [_strip(s, "rgb") for s in train[:4]]
    _, m, log = cross_modality_supervision("depth", "rgb", labelled, train[4:], test, _cfg(contrastive=mode))
    assert 0 <= m.miou <= 1
    has_term = [r["loss_contrastive"] is not None for r in log.records]
    assert all(has_term) if mode != "off" else not any(has_term)


def test_global_mode_loss_config():
    cfg = TransferConfig(contrastive="global").contrastive_loss()
    assert cfg.lambda_d == cfg.lambda_s == 0.0 and cfg.lambda_g > 0
    assert TransferConfig(contrastive="off").contrastive_loss() is None
    with pytest.raises(TransferError):
        TransferConfig(contrastive="sometimes")


# --- missing modality -----------------------------------------------------

def test_max_fusion_of_identical_maps_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 3, 4))
    assert np.array_equal(T.maximum(T.constant(x), T.constant(x.copy())).data, x)


def test_missing_modality_rejects_unimodal_training(data):
    train, test = data
    with pytest.raises(TransferError):
        missing_modality([_strip(train[0], "depth")] + train[1:], test, _cfg())


def test_missing_modality_reports_each_modality(data):
    train, test = data
    _, res, log = missing_modality(train, test, _cfg())
    assert set(res) == {"rgb", "depth", "fused"}
    single = [_strip(s, "rgb") for s in test]
    _, res2, _ = missing_modality(train, single, _cfg(), test_modalities=("depth",))
    assert set(res2) == {"depth"}
    assert res2["depth"] == res["depth"]
