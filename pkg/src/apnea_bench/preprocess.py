"""Effort-belt preprocessing: line-noise notch, low-pass, resampling to 10 Hz,
robust z-scoring and segmentation into 7 minute epochs.

Both filters run at the acquisition rate, before resampling; at 10 Hz the
60 Hz notch and 10 Hz low-pass would sit above Nyquist.  The low-pass also
serves as the first anti-alias stage ahead of the polyphase resampler.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DegenerateSignal, NyquistWarning, RateTooLow, RecordTooShort
from .record_io import EventClass, SignalRecord, events_to_timeline

TARGET_HZ = 10
EPOCH_S = 420
EPOCH_LEN = EPOCH_S * TARGET_HZ
_RESAMPLE_HALF_LEN = 20


@dataclass(frozen=True)
class PreprocessConfig:
    target_hz: int = TARGET_HZ
    notch_hz: float = 60.0
    notch_q: float = 30.0
    lowpass_hz: float = 10.0
    lowpass_order: int = 4
    clip_lo_pct: float = 1.0
    clip_hi_pct: float = 99.0
    train_stride_s: int = 30
    test_stride_s: int = 1
    epoch_s: int = EPOCH_S

    def __post_init__(self):
        if self.epoch_s * self.target_hz != EPOCH_LEN:
            raise ValueError("epoch_s * target_hz must equal 4200 samples")
        if self.train_stride_s <= 0 or self.test_stride_s <= 0:
            raise ValueError("strides must be positive")


@dataclass
class Epoch:
    samples: np.ndarray
    center_label: EventClass
    record_id: str
    center_time_s: float


def _above_nyquist(freq_hz, sample_rate_hz, what):
    if freq_hz >= sample_rate_hz / 2:
        warnings.warn(
            f"{what} at {freq_hz} Hz is at or above Nyquist for {sample_rate_hz} Hz "
            "sampling; returning input unchanged", NyquistWarning, stacklevel=3)
        return True
    return False


def notch_filter(samples, sample_rate_hz, notch_hz=60.0, q=30.0):
    """Zero-phase second-order IIR notch."""
    x = np.asarray(samples, dtype=np.float64)
    if _above_nyquist(notch_hz, sample_rate_hz, "notch"):
        return x.copy()
    b, a = signal.iirnotch(notch_hz, q, fs=sample_rate_hz)
    return signal.filtfilt(b, a, x)


def lowpass_filter(samples, sample_rate_hz, cutoff_hz=10.0, order=4):
    """Zero-phase Butterworth low-pass (forward-backward, so effective order doubles)."""
    x = np.asarray(samples, dtype=np.float64)
    if _above_nyquist(cutoff_hz, sample_rate_hz, "low-pass cutoff"):
        return x.copy()
    sos = signal.butter(order, cutoff_hz, btype="low", fs=sample_rate_hz, output="sos")
    return signal.sosfiltfilt(sos, x)


def resample_to_10hz(samples, sample_rate_hz):
    x = np.asarray(samples, dtype=np.float64)
    if sample_rate_hz < TARGET_HZ:
        raise RateTooLow(f"cannot resample {sample_rate_hz} Hz up to {TARGET_HZ} Hz")
    n_out = int(round(x.size * TARGET_HZ / sample_rate_hz))
    if sample_rate_hz == TARGET_HZ:
        return x.copy()
    ratio = Fraction(TARGET_HZ) / Fraction(sample_rate_hz).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    taps_half = _RESAMPLE_HALF_LEN * max(up, down)
    fir = signal.firwin(2 * taps_half + 1, 1.0 / max(up, down), window=("kaiser", 9.0))
    # odd reflection keeps value and slope continuous at both ends; the pad is a
    # whole number of decimation periods so the output grid stays aligned
    k = min(math.ceil(2 * taps_half / down) + 1, (x.size - 1) // down)
    p = k * down
    if p:
        x = np.concatenate((2 * x[0] - x[p:0:-1], x, 2 * x[-1] - x[-2:-p - 2:-1]))
    y = signal.resample_poly(x, up, down, window=fir)
    return y[k * up:k * up + n_out]


def normalize(samples, clip_lo_pct=1.0, clip_hi_pct=99.0):
    """Z-score with statistics taken from the percentile-clipped copy.

    The clipped copy only supplies mean and std; the returned array is the
    unclipped signal shifted and scaled by them.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 100:
        raise DegenerateSignal(f"need at least 100 samples to normalize, got {x.size}")
    lo, hi = np.percentile(x, [clip_lo_pct, clip_hi_pct])
    clipped = np.clip(x, lo, hi)
    std = clipped.std()
    if not std > 1e-8:
        raise DegenerateSignal("clipped signal has (near) zero variance")
    return (x - clipped.mean()) / std


def preprocess_samples(samples, sample_rate_hz, config: PreprocessConfig | None = None):
    """notch -> low-pass -> resample -> normalize; returns float32 at 10 Hz."""
    cfg = config or PreprocessConfig()
    with warnings.catch_warnings():
        # already-10 Hz input legitimately skips both filters
        warnings.simplefilter("ignore", NyquistWarning)
        x = notch_filter(samples, sample_rate_hz, cfg.notch_hz, cfg.notch_q)
        x = lowpass_filter(x, sample_rate_hz, cfg.lowpass_hz, cfg.lowpass_order)
    x = resample_to_10hz(x, sample_rate_hz)
    x = normalize(x, cfg.clip_lo_pct, cfg.clip_hi_pct)
    return x.astype(np.float32)


def preprocess_record(record: SignalRecord, config: PreprocessConfig | None = None) -> SignalRecord:
    x = preprocess_samples(record.samples, record.sample_rate_hz, config)
    return SignalRecord(record.record_id, float(TARGET_HZ), x, record.sleep_hours)


def n_epochs(duration_s, stride_s, epoch_s=EPOCH_S):
    if duration_s < epoch_s:
        return 0
    return int(math.floor((duration_s - epoch_s) / stride_s)) + 1


def segment_arrays(samples_10hz, timeline, stride_s, epoch_s=EPOCH_S):
    """Vectorized segmentation.

    Returns ``(windows, labels, start_s)`` where ``windows`` is a read-only
    strided view of shape ``(n, 4200)`` into ``samples_10hz``.
    """
    x = np.asarray(samples_10hz)
    duration_s = x.size / TARGET_HZ
    n = n_epochs(duration_s, stride_s, epoch_s)
    if n == 0:
        raise RecordTooShort(f"record of {duration_s:.1f} s is shorter than one {epoch_s} s epoch")
    timeline = np.asarray(timeline)
    win = epoch_s * TARGET_HZ
    starts = np.arange(n) * stride_s
    centers = np.floor(starts + epoch_s / 2).astype(int)
    if centers[-1] >= timeline.size:
        raise ValueError("label timeline does not cover the record")
    windows = np.lib.stride_tricks.sliding_window_view(x, win)[:: stride_s * TARGET_HZ][:n]
    return windows, timeline[centers].astype(np.int8), starts.astype(float)


def segment(record_10hz: SignalRecord, label_timeline, stride_s) -> list[Epoch]:
    windows, labels, starts = segment_arrays(record_10hz.samples, label_timeline, stride_s)
    return [
        Epoch(w, EventClass(int(lab)), record_10hz.record_id, float(s + EPOCH_S / 2))
        for w, lab, s in zip(windows, labels, starts)
    ]


class EffortBeltPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping raw records to normalized 10 Hz records.

    Normalization statistics are per record, so ``fit`` learns nothing; it
    only exists so the preprocessor can sit at the head of a pipeline.
    """

    def __init__(self, notch_hz=60.0, notch_q=30.0, lowpass_hz=10.0, lowpass_order=4,
                 clip_lo_pct=1.0, clip_hi_pct=99.0):
        self.notch_hz = notch_hz
        self.notch_q = notch_q
        self.lowpass_hz = lowpass_hz
        self.lowpass_order = lowpass_order
        self.clip_lo_pct = clip_lo_pct
        self.clip_hi_pct = clip_hi_pct

    def _config(self):
        return PreprocessConfig(
            notch_hz=self.notch_hz, notch_q=self.notch_q, lowpass_hz=self.lowpass_hz,
            lowpass_order=self.lowpass_order, clip_lo_pct=self.clip_lo_pct,
            clip_hi_pct=self.clip_hi_pct)

    def fit(self, records, y=None):
        return self

    def transform(self, records):
        cfg = self._config()
        return [preprocess_record(r, cfg) for r in records]


def training_epochs(record_10hz: SignalRecord, events, stride_s):
    """Windows and center labels for one preprocessed record."""
    timeline = events_to_timeline(events, record_10hz.duration_s)
    windows, labels, _ = segment_arrays(record_10hz.samples, timeline, stride_s)
    return windows, labels
