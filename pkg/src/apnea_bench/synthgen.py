"""Synthetic effort-belt recordings with injected, ground-truthed respiratory events.

The morphologies are deliberately caricatured so that a desk-scale model can
learn them:

* central apnea   -- effort amplitude scaled to ~0.05
* obstructive     -- amplitude ~0.3 plus irregular, paradoxical effort
* hypopnea        -- amplitude ~0.6
* RERA            -- crescendo of effort followed by an abrupt return
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigInfeasible
from .record_io import AnnotationEvent, EventClass, SignalRecord, save_events, save_record

AHI_CLASSES = (EventClass.OBSTRUCTIVE, EventClass.CENTRAL, EventClass.HYPOPNEA)

EVENT_GAIN = {
    EventClass.CENTRAL: 0.05,
    EventClass.OBSTRUCTIVE: 0.3,
    EventClass.HYPOPNEA: 0.6,
}
RERA_PEAK_GAIN = 1.8
OBSTRUCTIVE_EFFORT = 0.25

# target AHI per severity bin (normal, mild, moderate, severe)
DEFAULT_SEVERITY_AHI = (2.0, 9.0, 22.0, 45.0)


def _default_rates():
    return {
        EventClass.OBSTRUCTIVE: 7.0,
        EventClass.CENTRAL: 5.0,
        EventClass.RERA: 4.0,
        EventClass.HYPOPNEA: 8.0,
    }


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 7200.0
    sample_rate_hz: float = 125.0
    breath_rate_hz: float = 0.25
    amplitude_drift: float = 0.15
    noise_std: float = 0.05
    line_noise_amp: float = 0.1
    baseline_offset: float = 0.5
    events_per_hour: dict = field(default_factory=_default_rates)
    event_median_s: float = 18.0
    event_sigma: float = 0.25
    min_event_s: float = 10.0
    max_event_s: float = 60.0
    min_gap_s: float = 10.0
    margin_s: float = 210.0
    sleep_hours: float | None = None

    def __post_init__(self):
        if not 0.15 <= self.breath_rate_hz <= 0.4:
            raise ConfigInfeasible("breath_rate_hz must lie in [0.15, 0.4]")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ConfigInfeasible("duration and sample rate must be positive")
        if any(r < 0 for r in self.events_per_hour.values()):
            raise ConfigInfeasible("event rates must be nonnegative")
        if self.min_event_s > self.event_median_s or self.max_event_s < self.event_median_s:
            raise ConfigInfeasible("event median must lie within [min_event_s, max_event_s]")

    @property
    def hours(self):
        return self.duration_s / 3600.0


def _smooth_noise(rng, n, fs, corner_hz):
    """Unit-variance Gaussian noise low-passed at ``corner_hz``."""
    white = rng.standard_normal(n)
    sos = signal.butter(2, corner_hz, fs=fs, output="sos")
    out = signal.sosfiltfilt(sos, white)
    sd = out.std()
    return out / sd if sd > 0 else out


def _draw_durations(rng, n, cfg):
    out = np.empty(n)
    mu = math.log(cfg.event_median_s)
    for i in range(n):
        d = rng.lognormal(mu, cfg.event_sigma)
        while not cfg.min_event_s <= d <= cfg.max_event_s:
            d = rng.lognormal(mu, cfg.event_sigma)
        out[i] = d
    # 0.1 s grid, never rounding below the minimum
    return np.maximum(np.round(out, 1), cfg.min_event_s)


def place_events(rng, cfg: SynthConfig) -> list[AnnotationEvent]:
    """Draw event counts, durations and non-overlapping positions."""
    classes = []
    for cls in sorted(cfg.events_per_hour):
        count = int(round(cfg.events_per_hour[cls] * cfg.hours))
        classes.extend([EventClass(cls)] * count)
    if not classes:
        return []
    classes = [classes[i] for i in rng.permutation(len(classes))]
    durations = _draw_durations(rng, len(classes), cfg)

    usable = cfg.duration_s - 2 * cfg.margin_s
    slack = usable - durations.sum() - (len(classes) - 1) * cfg.min_gap_s
    if slack < 0:
        raise ConfigInfeasible(
            f"{len(classes)} events totalling {durations.sum():.0f} s do not fit "
            f"in {usable:.0f} s with {cfg.min_gap_s} s gaps")
    # split the slack into len+1 random gaps
    cuts = np.sort(rng.uniform(0.0, slack, size=len(classes)))
    extra = np.diff(np.concatenate(([0.0], cuts)))
    events = []
    t = cfg.margin_s
    for cls, dur, gap in zip(classes, durations, extra):
        t += gap
        start = math.floor(t * 10) / 10
        events.append(AnnotationEvent(round(start, 1), float(dur), cls))
        t = start + dur + cfg.min_gap_s
    return events


def event_envelope(events, n, fs, rng=None):
    """Multiplicative effort envelope and additive obstructive effort component."""
    gain = np.ones(n)
    extra = np.zeros(n)
    for ev in events:
        i0 = int(round(ev.start_s * fs))
        i1 = min(n, int(round(ev.end_s * fs)))
        if ev.event_class == EventClass.RERA:
            gain[i0:i1] = np.linspace(1.0, RERA_PEAK_GAIN, i1 - i0)
        else:
            gain[i0:i1] = EVENT_GAIN[ev.event_class]
        if ev.event_class == EventClass.OBSTRUCTIVE and rng is not None:
            # paradoxical, irregular effort against a closed airway
            seg = _smooth_noise(rng, i1 - i0, fs, 1.0) if i1 - i0 > 12 else np.zeros(i1 - i0)
            extra[i0:i1] = OBSTRUCTIVE_EFFORT * seg
    return gain, extra


def generate(config: SynthConfig, record_id: str | None = None):
    """Return ``(SignalRecord, events)``; deterministic in ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    events = place_events(rng, cfg)

    fs = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * fs))
    t = np.arange(n) / fs

    rate = cfg.breath_rate_hz * (1.0 + 0.05 * _smooth_noise(rng, n, fs, 0.01))
    phase = 2 * np.pi * np.cumsum(rate) / fs + rng.uniform(0, 2 * np.pi)
    breath = np.sin(phase) + 0.15 * np.sin(2 * phase)
    breath_jitter = 1.0 + 0.05 * _smooth_noise(rng, n, fs, 0.1)
    drift = 1.0 + cfg.amplitude_drift * _smooth_noise(rng, n, fs, 1.0 / 600.0)

    gain, extra = event_envelope(events, n, fs, rng)
    clean = drift * (gain * breath_jitter * breath + extra)

    x = clean + cfg.baseline_offset
    x = x + cfg.noise_std * rng.standard_normal(n)
    x = x + cfg.line_noise_amp * np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))

    sleep_hours = cfg.hours if cfg.sleep_hours is None else cfg.sleep_hours
    rid = record_id if record_id is not None else f"synth-{cfg.seed}"
    return SignalRecord(rid, fs, x.astype(np.float32), sleep_hours), events


def scale_to_ahi(template: SynthConfig, target_ahi: float) -> dict:
    """Rescale the template's rates so that OA + CA + HY per hour equals ``target_ahi``.

    RERAs are scaled by the same factor, preserving the template's mix.
    """
    rates = template.events_per_hour
    base = sum(rates.get(c, 0.0) for c in AHI_CLASSES)
    if base <= 0:
        return dict(rates)
    factor = target_ahi / base
    return {cls: r * factor for cls, r in rates.items()}


def split_counts(n_records, split_fracs):
    fracs = np.asarray(split_fracs, dtype=float)
    if np.any(fracs < 0) or not math.isclose(fracs.sum(), 1.0, abs_tol=1e-9):
        raise ConfigInfeasible(f"split fractions must be nonnegative and sum to 1, got {split_fracs}")
    raw = fracs * n_records
    counts = np.floor(raw + 1e-9).astype(int)
    # hand leftovers to the largest remainders, earliest split first on ties
    for i in np.argsort(-(raw - counts), kind="stable")[: n_records - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def make_corpus(n_records, config_template: SynthConfig, split_fracs=(0.8, 0.1, 0.1),
                out_dir=None, severity_ahi=DEFAULT_SEVERITY_AHI,
                split_names=("train", "val", "test")):
    """Generate a corpus and (optionally) write it with per-split manifests.

    Within every split, records cycle through ``severity_ahi`` targets
    (jittered by +-20%) so each split spans the severity range.  Pass
    ``severity_ahi=None`` to use the template rates unchanged.

    Returns ``{split: [entry, ...]}`` where an entry is the record's signal
    path when ``out_dir`` is given, else the tuple ``(record, events)``.
    """
    counts = split_counts(n_records, split_fracs)
    seeds = np.random.SeedSequence(config_template.seed).generate_state(n_records + 1)
    jitter_rng = np.random.default_rng(seeds[-1])
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "records").mkdir(parents=True, exist_ok=True)

    manifests = {}
    k = 0
    for name, count in zip(split_names, counts):
        entries = []
        for j in range(count):
            cfg = replace(config_template, seed=int(seeds[k]))
            if severity_ahi:
                target = severity_ahi[j % len(severity_ahi)] * jitter_rng.uniform(0.8, 1.2)
                cfg = replace(cfg, events_per_hour=scale_to_ahi(config_template, target))
            record, events = generate(cfg, record_id=f"rec{k:04d}")
            if out_dir is not None:
                sig = out_dir / "records" / f"{record.record_id}.sig"
                save_record(record, sig)
                save_events(events, annotation_path(sig))
                entries.append(str(sig))
            else:
                entries.append((record, events))
            k += 1
        manifests[name] = entries
        if out_dir is not None:
            # manifest lines are relative to the manifest's own directory
            lines = (Path(p).relative_to(out_dir).as_posix() + "\n" for p in entries)
            (out_dir / f"{name}.txt").write_text("".join(lines))
    return manifests


def annotation_path(signal_path):
    """Sidecar NDJSON path for a signal file: ``x.sig`` -> ``x.events.ndjson``."""
    p = Path(signal_path)
    return p.with_name(p.stem + ".events.ndjson")


def read_manifest(path):
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out
