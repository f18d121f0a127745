"""Boosted rebalancing cascade, main-model training and per-second prediction.

A cascade stage is a binary regular-breathing vs event model.  Its rejection
threshold is the highest event probability that still keeps the scheduled
fraction of validation event epochs (0.995 for stage 1, then 0.010 less per
stage).  Epochs scoring below it are dropped from the training pool, and the
cascade repeats on the survivors until regular breathing is at most
``balance_ratio`` times the event count (binary task) or the most common event
class (multiclass task).  At inference the same stages, in order, veto epochs
before the main model is consulted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import neuralnet as nn
from .errors import CascadeStalled, DegenerateValidationSet, RecordTooShort
from .preprocess import EPOCH_LEN, EPOCH_S, TARGET_HZ, n_epochs
from .record_io import EventClass

log = logging.getLogger(__name__)

BINARY_POSITIVE = (EventClass.OBSTRUCTIVE, EventClass.CENTRAL, EventClass.HYPOPNEA)
TASKS = ("binary", "multiclass")


def n_classes_for(task):
    return {"binary": 2, "multiclass": 5}[task]


def map_labels(timeline, task):
    """Binary: OA/mixed, CA and hypopnea become 1; no-event and RERA become 0.

    Multiclass labels pass through unchanged.
    """
    timeline = np.asarray(timeline)
    if task == "binary":
        return np.isin(timeline, BINARY_POSITIVE).astype(np.int8)
    if task == "multiclass":
        return timeline.astype(np.int8, copy=True)
    raise ValueError(f"unknown task {task!r}")


def event_indicator(labels, task):
    """Labels the boost stages train on: 1 for any event of the task, 0 for regular breathing."""
    labels = np.asarray(labels)
    return (labels > 0).astype(np.int8) if task == "multiclass" else labels.astype(np.int8)


def class_ratio(labels, task):
    """Regular-breathing epochs per event epoch, under the task's balance rule."""
    labels = np.asarray(labels)
    regular = int(np.sum(labels == 0))
    if task == "binary":
        events = int(np.sum(labels != 0))
    else:
        counts = np.bincount(labels.astype(np.int64), minlength=5)[1:]
        events = int(counts.max())
    return math.inf if events == 0 else regular / events


def select_threshold(val_probs, val_labels, target_tpr):
    """Largest event-probability threshold whose validation TPR is >= ``target_tpr``.

    Epochs with ``p_event >= threshold`` are kept; the rest are rejected as
    regular breathing.
    """
    p = np.asarray(val_probs, dtype=np.float64)
    lab = np.asarray(val_labels)
    events = np.sort(p[lab == 1])
    if events.size == 0 or not np.any(lab == 0):
        raise DegenerateValidationSet("validation pool needs both event and regular epochs")
    n = events.size
    k = int(math.floor(n * (1.0 - target_tpr) + 1e-9))
    k = min(max(k, 0), n - 1)
    while k > 0 and np.mean(events >= events[k]) < target_tpr:
        k -= 1
    return float(events[k])


def tpr_at(probs, labels, threshold):
    labels = np.asarray(labels)
    return float(np.mean(np.asarray(probs)[labels == 1] >= threshold))


@dataclass
class TrainConfig:
    n_layers: int = 12
    n_filters: int = 32
    dropout_p: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 5
    seed: int = 0

    def arch(self, n_classes):
        return nn.ArchSpec(n_layers=self.n_layers, n_filters=self.n_filters,
                           dropout_p=self.dropout_p, n_classes=n_classes,
                           input_len=EPOCH_LEN)


@dataclass
class CascadeConfig:
    task: str = "binary"
    balance_ratio: float = 3.0
    max_stages: int = 10
    first_tpr: float = 0.995
    tpr_step: float = 0.010
    min_removed_frac: float = 0.005

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    def target_tpr(self, stage_index):
        return self.first_tpr - self.tpr_step * (stage_index - 1)


@dataclass
class BoostStage:
    stage_index: int
    params: nn.ModelParams
    rejection_threshold: float
    target_tpr: float
    val_tpr: float = float("nan")
    pool_before: int = 0
    pool_after: int = 0
    history: list = field(default_factory=list, repr=False)


@dataclass
class CascadeResult:
    stages: list
    train_keep: np.ndarray
    val_keep: np.ndarray
    initial_ratio: float
    final_ratio: float
    max_stages_hit: bool = False


def _fit(X, y, X_val, y_val, arch, tcfg, seed, callback=None):
    return nn.fit_model(X, y, arch, X_val, y_val, seed=seed, lr=tcfg.learning_rate,
                        batch_size=tcfg.batch_size, max_steps=tcfg.max_steps,
                        eval_every=tcfg.eval_every, patience=tcfg.patience,
                        callback=callback)


def _event_prob(params, X, idx, batch_size=256):
    out = np.empty(idx.size)
    for i in range(0, idx.size, batch_size):
        out[i:i + batch_size] = nn.forward(params, X[idx[i:i + batch_size]])[:, 1]
    return out


def run_cascade(X_train, y_train, X_val, y_val, config: CascadeConfig,
                train_config: TrainConfig | None = None, callback=None) -> CascadeResult:
    """Train boost stages until the pool meets the balance rule.

    ``y_train``/``y_val`` are task labels (see :func:`map_labels`).  Returns
    the stages and boolean keep-masks over the training and validation
    epochs.  Raises :class:`CascadeStalled` when a stage removes less than
    ``min_removed_frac`` of the pool.
    """
    tcfg = train_config or TrainConfig()
    task = config.task
    y_train = np.asarray(y_train)
    y_val = np.asarray(y_val)
    yb_train = event_indicator(y_train, task)
    yb_val = event_indicator(y_val, task)
    pool = np.arange(len(X_train))
    vpool = np.arange(len(X_val))
    initial = class_ratio(y_train, task)
    stages = []
    hit_max = False
    arch = tcfg.arch(2)

    while class_ratio(y_train[pool], task) > config.balance_ratio:
        k = len(stages) + 1
        if k > config.max_stages:
            hit_max = True
            log.warning("cascade stopped at max_stages=%d with ratio %.2f",
                        config.max_stages, class_ratio(y_train[pool], task))
            break
        target = config.target_tpr(k)
        cb = None if callback is None else (lambda step, rec, k=k: callback(f"stage_{k}", step, rec))
        params, history = _fit(X_train[pool], yb_train[pool], X_val[vpool], yb_val[vpool],
                               arch, tcfg, seed=tcfg.seed + k, callback=cb)
        p_val = _event_prob(params, X_val, vpool)
        threshold = select_threshold(p_val, yb_val[vpool], target)
        achieved = tpr_at(p_val, yb_val[vpool], threshold)
        keep = _event_prob(params, X_train, pool) >= threshold
        removed = 1.0 - keep.mean()
        stage = BoostStage(k, params, threshold, target, achieved, pool.size,
                           int(keep.sum()), history)
        log.info("stage %d: target TPR %.3f, threshold %.4g, val TPR %.4f, pool %d -> %d",
                 k, target, threshold, achieved, pool.size, stage.pool_after)
        if removed < config.min_removed_frac:
            raise CascadeStalled(
                f"stage {k} removed only {removed:.2%} of {pool.size} epochs")
        stages.append(stage)
        pool = pool[keep]
        vpool = vpool[p_val >= threshold]

    train_keep = np.zeros(len(X_train), dtype=bool)
    train_keep[pool] = True
    val_keep = np.zeros(len(X_val), dtype=bool)
    val_keep[vpool] = True
    return CascadeResult(stages, train_keep, val_keep, initial,
                         class_ratio(y_train[pool], task), hit_max)


def train_main(X_train, y_train, X_val, y_val, task, train_config: TrainConfig | None = None,
               callback=None):
    """Main n-class model on the cascade-filtered pool; returns ``(params, history)``."""
    tcfg = train_config or TrainConfig()
    return _fit(X_train, np.asarray(y_train), X_val, np.asarray(y_val),
                tcfg.arch(n_classes_for(task)), tcfg, seed=tcfg.seed, callback=callback)


def predict_record(stages, main_params: nn.ModelParams, samples_10hz):
    """Per-second class probabilities, shape ``(floor(duration_s), n_classes)``.

    Every 1 s-stride epoch is scored at its center second.  An epoch vetoed
    by any stage becomes certain no-event.  Seconds closer than 210 s to
    either end copy the nearest scored second.
    """
    x = np.asarray(samples_10hz, dtype=np.float32)
    duration_s = x.size / TARGET_HZ
    n_ep = n_epochs(duration_s, 1)
    if n_ep == 0:
        raise RecordTooShort(f"record of {duration_s:.1f} s is shorter than one epoch")
    starts = np.arange(n_ep)
    positions = starts * TARGET_HZ + EPOCH_LEN - 1
    rejected = np.zeros(n_ep, dtype=bool)
    for stage in stages:
        p_event = nn.forward_sequence(stage.params, x, positions)[:, 1]
        rejected |= p_event < stage.rejection_threshold
    probs = nn.forward_sequence(main_params, x, positions).astype(np.float64)
    probs[rejected] = 0.0
    probs[rejected, 0] = 1.0

    n_sec = int(math.floor(duration_s))
    centers = starts + EPOCH_S // 2
    out = np.empty((n_sec, probs.shape[1]))
    out[centers] = probs
    out[:centers[0]] = probs[0]
    out[centers[-1] + 1:] = probs[-1]
    return out


class BoostCascade(BaseEstimator):
    """Estimator form of :func:`run_cascade`.

    ``fit`` learns the stages; ``transform``-style :meth:`keep_mask` reports
    which epochs survive every stage.
    """

    def __init__(self, task="binary", balance_ratio=3.0, max_stages=10, first_tpr=0.995,
                 tpr_step=0.010, min_removed_frac=0.005, train_config=None):
        self.task = task
        self.balance_ratio = balance_ratio
        self.max_stages = max_stages
        self.first_tpr = first_tpr
        self.tpr_step = tpr_step
        self.min_removed_frac = min_removed_frac
        self.train_config = train_config

    def fit(self, X, y, X_val, y_val):
        cfg = CascadeConfig(self.task, self.balance_ratio, self.max_stages, self.first_tpr,
                            self.tpr_step, self.min_removed_frac)
        self.result_ = run_cascade(X, y, X_val, y_val, cfg, self.train_config)
        self.stages_ = self.result_.stages
        return self

    def keep_mask(self, X):
        keep = np.ones(len(X), dtype=bool)
        idx = np.arange(len(X))
        for stage in self.stages_:
            keep &= _event_prob(stage.params, X, idx) >= stage.rejection_threshold
        return keep


class ApneaDetector(ClassifierMixin, BaseEstimator):
    """Cascade plus main model over epoch arrays.

    ``fit`` takes epochs and task labels (after :func:`map_labels`);
    ``predict_proba`` applies the stage vetoes then the main model;
    :meth:`predict_timeline` scores a whole preprocessed recording.
    """

    def __init__(self, task="binary", balance_ratio=3.0, max_stages=10, train_config=None):
        self.task = task
        self.balance_ratio = balance_ratio
        self.max_stages = max_stages
        self.train_config = train_config

    def fit(self, X, y, X_val, y_val):
        tcfg = self.train_config or TrainConfig()
        cascade = run_cascade(X, y, X_val, y_val,
                              CascadeConfig(self.task, self.balance_ratio, self.max_stages), tcfg)
        self.cascade_ = cascade
        self.stages_ = cascade.stages
        self.main_params_, self.history_ = train_main(
            X[cascade.train_keep], np.asarray(y)[cascade.train_keep],
            X_val[cascade.val_keep], np.asarray(y_val)[cascade.val_keep], self.task, tcfg)
        self.classes_ = np.arange(n_classes_for(self.task))
        return self

    def predict_proba(self, X):
        probs = nn.predict_proba_batched(self.main_params_, X)
        keep = np.ones(len(X), dtype=bool)
        idx = np.arange(len(X))
        for stage in self.stages_:
            keep &= _event_prob(stage.params, X, idx) >= stage.rejection_threshold
        probs[~keep] = 0.0
        probs[~keep, 0] = 1.0
        return probs

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_timeline(self, samples_10hz):
        return predict_record(self.stages_, self.main_params_, samples_10hz)
