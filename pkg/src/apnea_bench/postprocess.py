"""Smoothing of 1 Hz predictions into events, and event-level matching.

Smoothing works on consecutive, non-overlapping 10 s windows starting at
t = 0.  A window with at least 3 no-event seconds is cleared; otherwise it
takes its most frequent event class (ties to the lowest code).  Runs of
adjacent event windows are then fused and relabelled with the class holding
the most seconds of the run's original predictions.  A trailing partial
window is cleared, so every emitted event is a whole number of windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .record_io import EventClass, timeline_to_events

N_CODES = len(EventClass)


@dataclass(frozen=True)
class SmoothingConfig:
    window_s: int = 10
    noevent_quorum: int = 3
    min_event_s: int = 10
    merge_min_total_windows: int = 2

    def __post_init__(self):
        if min(self.window_s, self.noevent_quorum, self.min_event_s,
               self.merge_min_total_windows) <= 0:
            raise ValueError("smoothing parameters must be positive")
        if self.noevent_quorum > self.window_s:
            raise ValueError("noevent_quorum cannot exceed window_s")


def _dominant(counts):
    """Index of the largest count among event codes 1.. (ties -> lowest code)."""
    return int(np.argmax(counts[1:])) + 1


def smooth(timeline, config: SmoothingConfig | None = None):
    cfg = config or SmoothingConfig()
    tl = np.asarray(timeline).astype(np.int8)
    w = cfg.window_s
    n_win = tl.size // w
    out = np.zeros_like(tl)
    if n_win == 0:
        return out

    windows = tl[: n_win * w].reshape(n_win, w)
    counts = np.stack([(windows == c).sum(axis=1) for c in range(N_CODES)], axis=1)
    is_event = counts[:, 0] < cfg.noevent_quorum
    win_class = np.where(is_event, np.argmax(counts[:, 1:], axis=1) + 1, 0)

    i = 0
    while i < n_win:
        if not is_event[i]:
            i += 1
            continue
        j = i
        while j + 1 < n_win and is_event[j + 1]:
            j += 1
        if j - i + 1 >= cfg.merge_min_total_windows:
            cls = _dominant(counts[i:j + 1].sum(axis=0))
        else:
            cls = win_class[i]
        out[i * w:(j + 1) * w] = cls
        i = j + 1
    return out


def smoothed_events(timeline, config: SmoothingConfig | None = None):
    return timeline_to_events(smooth(timeline, config))


class EventSmoother(BaseEstimator, TransformerMixin):
    """Transformer form of :func:`smooth` over a list of 1 Hz timelines."""

    def __init__(self, window_s=10, noevent_quorum=3, min_event_s=10, merge_min_total_windows=2):
        self.window_s = window_s
        self.noevent_quorum = noevent_quorum
        self.min_event_s = min_event_s
        self.merge_min_total_windows = merge_min_total_windows

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = SmoothingConfig(self.window_s, self.noevent_quorum, self.min_event_s,
                              self.merge_min_total_windows)
        return [smooth(tl, cfg) for tl in X]


# --- matching ---------------------------------------------------------------

@dataclass
class MatchResult:
    pred_match: list            # per prediction: index of matched reference or None
    ref_matched: list           # per reference: matched by a correct prediction
    pred_overlap_class: list    # per prediction: class of the reference it mostly covers, or NO_EVENT
    ref_confused_with: list     # per reference: class it was predicted as, NO_EVENT if missed
    n_pred: int = 0
    n_ref: int = 0

    @property
    def tp(self):
        """Correct predictions (prediction side)."""
        return sum(m is not None for m in self.pred_match)

    @property
    def fp(self):
        return self.n_pred - self.tp

    @property
    def tp_ref(self):
        """References hit by at least one correct prediction."""
        return sum(self.ref_matched)

    @property
    def fn(self):
        return self.n_ref - self.tp_ref


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def match_events(predicted, reference, require_class=False):
    """Match predictions to reference events by the >50 % overlap rule.

    A prediction is correct when strictly more than half of its duration is
    covered by reference events (of its own class when ``require_class``).
    It is credited to the reference it overlaps most among those.  Both
    lists must be sorted and internally non-overlapping.
    """
    pred = list(predicted)
    ref = list(reference)
    ref_starts = np.array([r.start_s for r in ref])
    ref_ends = np.array([r.end_s for r in ref])
    pred_match, pred_cls = [], []
    ref_matched = [False] * len(ref)
    ref_conf = [EventClass.NO_EVENT] * len(ref)
    ref_conf_overlap = [0.0] * len(ref)

    for p in pred:
        lo = int(np.searchsorted(ref_ends, p.start_s, side="right"))
        hi = int(np.searchsorted(ref_starts, p.end_s, side="left"))
        overlaps = [(k, _overlap(p.start_s, p.end_s, ref[k].start_s, ref[k].end_s))
                    for k in range(lo, hi)]
        overlaps = [(k, ov) for k, ov in overlaps if ov > 0]
        same = [(k, ov) for k, ov in overlaps if ref[k].event_class == p.event_class]
        pool = same if require_class else overlaps
        half = 0.5 * p.duration_s

        matched = None
        if sum(ov for _, ov in pool) > half:
            matched = max(pool, key=lambda kv: (kv[1], -kv[0]))[0]
            ref_matched[matched] = True
        pred_match.append(matched)

        if sum(ov for _, ov in overlaps) > half:
            best = max(overlaps, key=lambda kv: (kv[1], -kv[0]))[0]
            pred_cls.append(ref[best].event_class)
            if matched is None:
                # sits on reference events but with the wrong class: a confusion
                for k, ov in overlaps:
                    if ov > ref_conf_overlap[k]:
                        ref_conf[k], ref_conf_overlap[k] = p.event_class, ov
        else:
            pred_cls.append(EventClass.NO_EVENT)

    for k, hit in enumerate(ref_matched):
        if hit:
            ref_conf[k] = ref[k].event_class
    return MatchResult(pred_match, ref_matched, pred_cls, ref_conf, len(pred), len(ref))


def _covered_time(events):
    """Total length of the union of event intervals."""
    spans = sorted((e.start_s, e.end_s) for e in events)
    total, cur0, cur1 = 0.0, None, None
    for a, b in spans:
        if cur1 is None or a > cur1:
            if cur1 is not None:
                total += cur1 - cur0
            cur0, cur1 = a, b
        else:
            cur1 = max(cur1, b)
    if cur1 is not None:
        total += cur1 - cur0
    return total


def count_true_negatives(reference, record_duration_s, median_event_s=18.0, false_positives=()):
    """Regular-breathing time in units of the median event length.

    Regular breathing is the record minus the time covered by reference
    events or false-positive predictions (their union, so a false positive
    clipping a reference event is not subtracted twice).
    """
    if not median_event_s > 0:
        raise ValueError("median_event_s must be positive")
    busy = _covered_time(list(reference) + list(false_positives))
    return max(0, int(math.floor((record_duration_s - busy) / median_event_s + 1e-9)))


def false_positive_events(predicted, match: MatchResult):
    return [p for p, m in zip(predicted, match.pred_match) if m is None]
