import numpy as np
import pytest
from sklearn.base import clone

from apnea_bench import neuralnet as nn
from apnea_bench.errors import CascadeStalled, DegenerateValidationSet, RecordTooShort
from apnea_bench.preprocess import EPOCH_LEN
from apnea_bench.trainer import (ApneaDetector, BoostCascade, BoostStage, CascadeConfig,
                                 TrainConfig, class_ratio, map_labels, predict_record,
                                 run_cascade, select_threshold, tpr_at, train_main)

TINY = TrainConfig(n_layers=4, n_filters=4, dropout_p=0.0, learning_rate=1e-2, batch_size=32,
                   max_steps=60, eval_every=20, patience=3, seed=0)


def toy_epochs(rng, n_regular, n_event, classes=(1,)):
    """Epochs whose last 16 samples carry a class-specific level."""
    labels = np.r_[np.zeros(n_regular, int), rng.choice(classes, size=n_event)]
    x = rng.standard_normal((labels.size, EPOCH_LEN)).astype(np.float32) * 0.3
    x[:, -16:] += (labels[:, None] * 1.5 - 1.0).astype(np.float32)
    order = rng.permutation(labels.size)
    return x[order], labels[order]


def test_map_labels():
    assert map_labels([0, 1, 2, 3, 4], "binary").tolist() == [0, 1, 1, 0, 1]
    assert map_labels([0, 0, 0], "binary").tolist() == [0, 0, 0]
    assert map_labels([0, 1, 2, 3, 4], "multiclass").tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        map_labels([0], "ternary")


def test_class_ratio_rules():
    labels = np.array([0] * 30 + [1] * 5 + [2] * 5)
    assert class_ratio(labels, "binary") == 3.0
    assert class_ratio(labels, "multiclass") == 6.0
    assert class_ratio(np.zeros(4, int), "binary") == np.inf


def test_cascade_target_schedule():
    cfg = CascadeConfig()
    assert [round(cfg.target_tpr(k), 3) for k in (1, 2, 3)] == [0.995, 0.985, 0.975]


def test_threshold_separated_scores():
    p = np.r_[np.full(50, 0.9), np.full(50, 0.1)]
    y = np.r_[np.ones(50), np.zeros(50)]
    t = select_threshold(p, y, 0.995)
    assert 0.1 < t <= 0.9
    assert tpr_at(p, y, t) == 1.0


def test_threshold_target_one_keeps_every_event(rng):
    p = rng.random(200)
    y = rng.integers(0, 2, 200)
    t = select_threshold(p, y, 1.0)
    assert t <= p[y == 1].min()
    assert tpr_at(p, y, t) == 1.0


def test_threshold_brute_force(rng):
    for _ in range(300):
        n = int(rng.integers(2, 60))
        p = np.round(rng.random(n), int(rng.integers(1, 3)))   # coarse grid forces ties
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        target = float(rng.choice([0.995, 0.985, 0.9, 0.75, 0.5]))
        ok = [c for c in np.unique(p) if np.mean(p[y == 1] >= c) >= target]
        t = select_threshold(p, y, target)
        assert t == max(ok)
        assert tpr_at(p, y, t) >= target


def test_threshold_degenerate():
    with pytest.raises(DegenerateValidationSet):
        select_threshold([0.1, 0.2], [0, 0], 0.9)
    with pytest.raises(DegenerateValidationSet):
        select_threshold([0.1, 0.2], [1, 1], 0.9)


def test_cascade_skipped_when_balanced(rng):
    x, y = toy_epochs(rng, 20, 10)
    res = run_cascade(x, y, x, y, CascadeConfig(), TINY)
    assert res.stages == []
    assert res.train_keep.all() and res.val_keep.all()


def test_cascade_reaches_ratio_and_targets(rng):
    x, y = toy_epochs(rng, 1000, 20)
    xv, yv = toy_epochs(rng, 500, 60)
    assert class_ratio(y, "binary") == 50
    res = run_cascade(x, y, xv, yv, CascadeConfig(), TINY)
    assert 1 <= len(res.stages) <= 10
    assert res.final_ratio <= 3
    assert not res.max_stages_hit
    for st in res.stages:
        assert st.val_tpr >= st.target_tpr
        assert st.pool_after < st.pool_before
    # every stage only removes epochs
    assert res.train_keep.sum() == res.stages[-1].pool_after
    assert y[res.train_keep].sum() >= 0.9 * y.sum()


def test_cascade_multiclass_rule(rng):
    x, y = toy_epochs(rng, 600, 40, classes=(1, 2))
    xv, yv = toy_epochs(rng, 300, 40, classes=(1, 2))
    res = run_cascade(x, y, xv, yv, CascadeConfig(task="multiclass"), TINY)
    assert class_ratio(y[res.train_keep], "multiclass") <= 3


def test_cascade_stalls_on_indistinguishable_epochs():
    x = np.zeros((200, EPOCH_LEN), np.float32)
    y = np.r_[np.zeros(190, int), np.ones(10, int)]
    with pytest.raises(CascadeStalled):
        run_cascade(x, y, x, y, CascadeConfig(), TINY)


def test_max_stages_flag(rng):
    x, y = toy_epochs(rng, 1000, 20)
    res = run_cascade(x, y, x, y, CascadeConfig(max_stages=0), TINY)
    assert res.max_stages_hit
    assert res.stages == []


def test_train_main_toy_accuracy(rng):
    x, y = toy_epochs(rng, 150, 150)
    xv, yv = toy_epochs(rng, 50, 50)
    params, hist = train_main(x, y, xv, yv, "binary", TINY)
    acc = np.mean(nn.predict_proba_batched(params, x).argmax(1) == y)
    assert acc > 0.95
    again, _ = train_main(x, y, xv, yv, "binary", TINY)
    assert np.array_equal(params.flat(), again.flat())
    vals = [h["val_loss"] for h in hist if "val_loss" in h]
    assert nn.mean_loss(params, xv, yv) <= vals[-1] + 1e-6


def test_predict_record_shapes_and_vetoes(rng):
    arch = TINY.arch(2)
    main = nn.init_params(arch, rng)
    x = rng.standard_normal(4205 * 2).astype(np.float32)   # 841 s
    probs = predict_record([], main, x)
    assert probs.shape == (841, 2)
    assert np.allclose(probs.sum(1), 1)
    n_ep = 841 - 420 + 1
    pos = np.arange(n_ep) * 10 + EPOCH_LEN - 1
    direct = nn.forward_sequence(main, x, pos)
    assert np.allclose(probs[210:210 + n_ep], direct)
    assert np.allclose(probs[:210], direct[0])
    assert np.allclose(probs[210 + n_ep:], direct[-1])

    veto_all = BoostStage(1, nn.init_params(arch, rng), 1.1, 0.995)
    vetoed = predict_record([veto_all], main, x)
    assert np.all(vetoed[:, 0] == 1.0)
    with pytest.raises(RecordTooShort):
        predict_record([], main, x[:4000])


def test_estimators(rng):
    x, y = toy_epochs(rng, 300, 20)
    xv, yv = toy_epochs(rng, 200, 40)
    casc = BoostCascade(train_config=TINY)
    assert clone(casc).get_params()["balance_ratio"] == 3.0
    casc.fit(x, y, xv, yv)
    assert np.array_equal(casc.keep_mask(x), casc.result_.train_keep)

    det = ApneaDetector(train_config=TINY).fit(x, y, xv, yv)
    proba = det.predict_proba(xv)
    assert proba.shape == (len(xv), 2)
    assert np.allclose(proba.sum(1), 1)
    assert det.score(xv, yv) > 0.9
