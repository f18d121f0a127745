"""Per-event and per-patient evaluation, and the machine-readable report.

Event-level confusion matrices count reference events on the true-class rows
and unmatched predictions on the no-event row.  The no-event diagonal cell
holds regular-breathing time quantized by the median event length.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .errors import DegenerateDesign, SingleClassInput, ZeroSleepHours
from .postprocess import count_true_negatives, false_positive_events, match_events
from .record_io import AnnotationEvent, EventClass

REPORT_VERSION = 1
MEDIAN_EVENT_S = 18.0
SEVERITIES = ("normal", "mild", "moderate", "severe")
CLASS_LABELS = ("no_event", "obstructive", "central", "rera", "hypopnea")
AHI_CODES = (EventClass.OBSTRUCTIVE, EventClass.CENTRAL, EventClass.HYPOPNEA)
BISQUARE_C = 4.685


# --- formula block ----------------------------------------------------------

def _ratio(num, den):
    return None if den == 0 else num / den


def metrics(tp, tn, fp, fn):
    """Accuracy, sensitivity, specificity, precision and F1.

    A ratio with a zero denominator is reported as ``None``.
    """
    sens = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    if sens is None or prec is None or sens + prec == 0:
        f1 = None
    else:
        f1 = 2 * sens * prec / (sens + prec)
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "sensitivity": sens,
        "specificity": _ratio(tn, tn + fp),
        "precision": prec,
        "f1": f1,
    }


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion counts must be square")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be nonnegative")
        if not self.labels:
            self.labels = tuple(str(i) for i in range(self.n_classes))

    @classmethod
    def zeros(cls, n_classes, labels=()):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64), labels)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.labels)

    def normalized(self):
        """Row-normalized matrix; all-zero rows stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def one_vs_rest(self, c):
        m = self.counts
        tp = int(m[c, c])
        fn = int(m[c].sum() - tp)
        fp = int(m[:, c].sum() - tp)
        tn = int(m.sum() - tp - fn - fp)
        return tp, tn, fp, fn

    def class_metrics(self, c):
        tp, tn, fp, fn = self.one_vs_rest(c)
        return {"tp": tp, "tn": tn, "fp": fp, "fn": fn, **metrics(tp, tn, fp, fn)}

    def overall(self):
        """Binary: metrics of the event class.  Multiclass: mean over event classes."""
        if self.n_classes == 2:
            return metrics(*self.one_vs_rest(1))
        per = [metrics(*self.one_vs_rest(c)) for c in range(1, self.n_classes)]
        out = {}
        for key in per[0]:
            vals = [p[key] for p in per if p[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out


# --- curves -----------------------------------------------------------------

def roc_prc(scores, labels):
    """ROC and precision-recall curves over every distinct score, with trapezoidal areas.

    Returns a dict with ``roc_points`` (fpr, tpr), ``prc_points`` (recall,
    precision), ``thresholds``, ``auc_roc`` and ``auc_prc``.  Both curves
    start at the most conservative point: (0, 0) for ROC, (0, 1) for PRC.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    cut = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tps = np.cumsum(y_sorted)[cut].astype(float)
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    recall = np.r_[0.0, tps / n_pos]
    precision = np.r_[1.0, tps / (tps + fps)]
    return {
        "roc_points": np.column_stack((fpr, tpr)),
        "prc_points": np.column_stack((recall, precision)),
        "thresholds": s_sorted[cut],
        "auc_roc": float(np.trapezoid(tpr, fpr)),
        "auc_prc": float(np.trapezoid(precision, recall)),
    }


# --- per patient ------------------------------------------------------------

def event_counts(events):
    counts = {c: 0 for c in EventClass if c != EventClass.NO_EVENT}
    for ev in events:
        counts[EventClass(ev.event_class)] += 1
    return counts


def ahi_rdi(events, sleep_hours):
    """AHI = (OA + CA + HY) / h and RDI = AHI + RERA / h, plus per-class rates."""
    if not sleep_hours > 0:
        raise ZeroSleepHours("sleep_hours must be positive to compute AHI/RDI")
    counts = event_counts(events)
    ahi = sum(counts[c] for c in AHI_CODES) / sleep_hours
    rdi = ahi + counts[EventClass.RERA] / sleep_hours
    rates = {CLASS_LABELS[int(c)]: n / sleep_hours for c, n in counts.items()}
    return {"ahi": ahi, "rdi": rdi, "rates": rates}


def severity(ahi):
    """Half-open AASM bins: [0,5) normal, [5,15) mild, [15,30) moderate, [30,inf) severe."""
    if ahi < 5:
        return "normal"
    if ahi < 15:
        return "mild"
    if ahi < 30:
        return "moderate"
    return "severe"


@dataclass
class PatientSummary:
    record_id: str
    ahi_true: float
    ahi_pred: float
    rdi_true: float
    rdi_pred: float | None
    rates_true: dict
    rates_pred: dict
    severity_true: str
    severity_pred: str


# --- robust regression ------------------------------------------------------

@dataclass
class RegressionFit:
    slope: float
    intercept: float
    r_squared: float
    iterations: int
    converged: bool
    weights: np.ndarray = field(default=None, repr=False)

    def to_json(self):
        d = asdict(self)
        d.pop("weights")
        return d


def _wls(X, y, w):
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return beta


def robust_fit(x, y, tuning=BISQUARE_C, max_iter=100, tol=1e-8):
    """Straight-line fit by IRLS with Tukey bisquare weights.

    The residual scale is MAD / 0.6745, recomputed every iteration; the
    iteration stops when no coefficient moves by more than ``tol`` (relative
    to its magnitude, floored at 1) or after ``max_iter`` rounds.
    ``r_squared`` is ``1 - SS_res / SS_tot`` on the unweighted residuals of
    the final line, floored at 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateDesign("x and y must be 1-D and of equal length")
    if x.size < 3:
        raise DegenerateDesign("need at least 3 points")
    if np.ptp(x) == 0:
        raise DegenerateDesign("x is constant")
    X = np.column_stack((np.ones_like(x), x))
    beta = _wls(X, y, np.ones_like(x))
    w = np.ones_like(x)
    scale_floor = 1e-12 * max(1.0, np.abs(y).max())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = y - X @ beta
        s = np.median(np.abs(r - np.median(r))) / 0.6745
        if s <= scale_floor:
            # (near) exact fit: every point is an inlier
            w = np.ones_like(x)
            converged = True
            break
        u = r / (tuning * s)
        w = np.where(np.abs(u) < 1, (1 - u * u) ** 2, 0.0)
        if np.count_nonzero(w) < 2:
            break
        new = _wls(X, y, w)
        step = np.max(np.abs(new - beta) / np.maximum(1.0, np.abs(beta)))
        beta = new
        if step < tol:
            converged = True
            break
    resid = y - X @ beta
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - np.sum(resid ** 2) / ss_tot)
    return RegressionFit(float(beta[1]), float(beta[0]), float(min(r2, 1.0)), it, converged, w)


class RobustLinearRegression(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`robust_fit` for a single feature."""

    def __init__(self, tuning=BISQUARE_C, max_iter=100, tol=1e-8):
        self.tuning = tuning
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 1:
            raise DegenerateDesign("RobustLinearRegression takes exactly one feature")
        self.fit_ = robust_fit(X[:, 0], y, self.tuning, self.max_iter, self.tol)
        self.coef_ = np.array([self.fit_.slope])
        self.intercept_ = self.fit_.intercept
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return X[:, 0] * self.coef_[0] + self.intercept_


def pearson_r2(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1] ** 2)


def ahi_error_histogram(summaries, bin_width=2.5):
    """Histogram of ``ahi_pred - ahi_true`` with bins centred on multiples of ``bin_width``.

    ``summaries`` is a sequence of :class:`PatientSummary` or of raw differences.
    """
    items = list(summaries)
    if not items:
        raise ValueError("need at least one patient")
    if isinstance(items[0], PatientSummary):
        d = np.array([s.ahi_pred - s.ahi_true for s in items])
    else:
        d = np.asarray(items, dtype=np.float64)
    lo = math.floor(d.min() / bin_width + 0.5)
    hi = math.floor(d.max() / bin_width + 0.5) + 1
    edges = (np.arange(lo, hi + 1) - 0.5) * bin_width
    counts, _ = np.histogram(d, bins=edges)
    std = float(d.std(ddof=1)) if d.size > 1 else 0.0
    return {"bin_width": bin_width, "bin_edges": edges.tolist(), "counts": counts.tolist(),
            "mean": float(d.mean()), "std": std}


# --- per record ---------------------------------------------------------------

def task_reference(events, task):
    """Reference events relevant to a task; binary keeps AHI events relabelled to 1."""
    if task == "multiclass":
        return list(events)
    return [AnnotationEvent(e.start_s, e.duration_s, EventClass.OBSTRUCTIVE)
            for e in events if e.event_class in AHI_CODES]


def event_confusion(predicted, reference, duration_s, task, median_event_s=MEDIAN_EVENT_S):
    """Per-record event-level confusion matrix (2x2 binary or 5x5 multiclass)."""
    ref = task_reference(reference, task)
    n = 2 if task == "binary" else 5
    labels = ("no_event", "event") if task == "binary" else CLASS_LABELS
    m = np.zeros((n, n), dtype=np.int64)
    match = match_events(predicted, ref, require_class=(task == "multiclass"))
    for r, conf in zip(ref, match.ref_confused_with):
        m[int(r.event_class), int(conf)] += 1
    for p, cls in zip(predicted, match.pred_overlap_class):
        if cls == EventClass.NO_EVENT:
            m[0, int(p.event_class)] += 1
    m[0, 0] = count_true_negatives(ref, duration_s, median_event_s,
                                   false_positive_events(predicted, match))
    return ConfusionMatrix(m, labels)


@dataclass
class RecordEvaluation:
    record_id: str
    task: str
    duration_s: float
    sleep_hours: float
    confusion: ConfusionMatrix
    summary: PatientSummary
    second_scores: np.ndarray | None = None    # P(event) per second, before smoothing
    second_truth: np.ndarray | None = None     # task label per second
    second_pred: np.ndarray | None = None      # smoothed predicted label per second


def evaluate_record(record_id, reference, predicted, duration_s, sleep_hours, task,
                    second_probs=None, truth_timeline=None, smoothed_timeline=None,
                    median_event_s=MEDIAN_EVENT_S):
    """Everything the report needs from one recording.

    ``reference`` holds the expert events with their original classes;
    ``predicted`` the smoothed predicted events (code 1 for binary events).
    """
    from .trainer import map_labels

    conf = event_confusion(predicted, reference, duration_s, task, median_event_s)
    truth = ahi_rdi(reference, sleep_hours)
    pred = ahi_rdi(predicted, sleep_hours)
    summary = PatientSummary(
        record_id=record_id,
        ahi_true=truth["ahi"], ahi_pred=pred["ahi"],
        rdi_true=truth["rdi"], rdi_pred=pred["rdi"] if task == "multiclass" else None,
        rates_true=truth["rates"],
        rates_pred=pred["rates"] if task == "multiclass" else {"event": pred["ahi"]},
        severity_true=severity(truth["ahi"]), severity_pred=severity(pred["ahi"]))
    ev = RecordEvaluation(record_id, task, duration_s, sleep_hours, conf, summary)
    if second_probs is not None:
        ev.second_scores = 1.0 - np.asarray(second_probs)[:, 0]
    if truth_timeline is not None:
        ev.second_truth = map_labels(truth_timeline, task)
    if smoothed_timeline is not None:
        ev.second_pred = np.asarray(smoothed_timeline)
    return ev


# --- report -----------------------------------------------------------------

def severity_confusion(summaries):
    idx = {s: i for i, s in enumerate(SEVERITIES)}
    m = np.zeros((4, 4), dtype=np.int64)
    for s in summaries:
        m[idx[s.severity_true], idx[s.severity_pred]] += 1
    acc = float(np.trace(m) / m.sum()) if m.sum() else None
    return {"labels": list(SEVERITIES), "confusion": m.tolist(), "accuracy": acc}


def _regression_block(x, y):
    block = {"pearson_r2": pearson_r2(x, y), "n": len(x)}
    try:
        block.update(robust_fit(x, y).to_json())
    except DegenerateDesign as exc:
        block["error"] = str(exc)
    return block


def _thin(points, max_points=2000):
    if len(points) <= max_points:
        return points
    idx = np.unique(np.linspace(0, len(points) - 1, max_points).round().astype(int))
    return points[idx]


def build_report(results, median_event_s=MEDIAN_EVENT_S, hist_bin_width=2.5):
    """Aggregate :class:`RecordEvaluation` objects into a JSON-ready report.

    Returns ``(report, curves)``; ``curves`` carries the ROC/PRC point arrays
    for the plot artifacts, which are too large to inline in the report.
    """
    results = list(results)
    if not results:
        raise ValueError("no evaluated records")
    task = results[0].task
    total = results[0].confusion
    for r in results[1:]:
        total = total + r.confusion
    summaries = [r.summary for r in results]

    class_range = range(1, total.n_classes)
    report = {
        "report_version": REPORT_VERSION,
        "task": task,
        "n_records": len(results),
        "median_event_s": median_event_s,
        "event_confusion": {
            "labels": list(total.labels),
            "absolute": total.counts.tolist(),
            "normalized": total.normalized().tolist(),
        },
        "overall_metrics": total.overall(),
        "per_class_metrics": {total.labels[c]: total.class_metrics(c) for c in class_range},
        "severity": severity_confusion(summaries),
        "patients": [asdict(s) for s in summaries],
        "regression": {},
        "ahi_error": ahi_error_histogram(summaries, hist_bin_width),
        "auc_roc": None,
        "auc_prc": None,
        "per_second": None,
    }

    ahi_t = [s.ahi_true for s in summaries]
    ahi_p = [s.ahi_pred for s in summaries]
    report["regression"]["ahi"] = _regression_block(ahi_t, ahi_p)
    if task == "multiclass":
        report["regression"]["rdi"] = _regression_block(
            [s.rdi_true for s in summaries], [s.rdi_pred for s in summaries])
        for name in CLASS_LABELS[1:]:
            report["regression"][name] = _regression_block(
                [s.rates_true[name] for s in summaries], [s.rates_pred[name] for s in summaries])

    curves = {}
    if all(r.second_scores is not None and r.second_truth is not None for r in results):
        scores = np.concatenate([r.second_scores for r in results])
        truth = np.concatenate([r.second_truth for r in results])
        try:
            rp = roc_prc(scores, truth > 0)
            report["auc_roc"] = rp["auc_roc"]
            report["auc_prc"] = rp["auc_prc"]
            curves = {"roc": _thin(rp["roc_points"]), "prc": _thin(rp["prc_points"])}
        except SingleClassInput:
            pass
        block = {"n_seconds": int(truth.size)}
        if all(r.second_pred is not None for r in results):
            pred = np.concatenate([r.second_pred for r in results])
            if task == "binary":
                pred = (pred > 0).astype(np.int8)
            block["accuracy"] = float(np.mean(pred == truth))
        report["per_second"] = block
    return report, curves


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["report_version", "task", "n_records", "median_event_s", "event_confusion",
                 "overall_metrics", "per_class_metrics", "severity", "patients",
                 "regression", "ahi_error", "auc_roc", "auc_prc", "per_second"],
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "task": {"enum": ["binary", "multiclass"]},
        "n_records": {"type": "integer", "minimum": 1},
        "median_event_s": {"type": "number", "exclusiveMinimum": 0},
        "event_confusion": {
            "type": "object",
            "required": ["labels", "absolute", "normalized"],
            "properties": {
                "labels": {"type": "array", "items": {"type": "string"}},
                "absolute": {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer", "minimum": 0}}},
                "normalized": {"type": "array", "items": {
                    "type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}},
            },
        },
        "overall_metrics": {"$ref": "#/$defs/metrics"},
        "per_class_metrics": {"type": "object", "additionalProperties": {"$ref": "#/$defs/metrics"}},
        "severity": {
            "type": "object",
            "required": ["labels", "confusion", "accuracy"],
            "properties": {
                "labels": {"const": list(SEVERITIES)},
                "confusion": {"type": "array", "minItems": 4, "maxItems": 4},
                "accuracy": {"type": ["number", "null"]},
            },
        },
        "patients": {"type": "array", "items": {
            "type": "object",
            "required": ["record_id", "ahi_true", "ahi_pred", "rdi_true", "rdi_pred",
                         "severity_true", "severity_pred"],
            "properties": {
                "ahi_true": {"type": "number", "minimum": 0},
                "ahi_pred": {"type": "number", "minimum": 0},
                "rdi_true": {"type": "number", "minimum": 0},
                "rdi_pred": {"type": ["number", "null"], "minimum": 0},
                "severity_true": {"enum": list(SEVERITIES)},
                "severity_pred": {"enum": list(SEVERITIES)},
            },
        }},
        "regression": {"type": "object"},
        "ahi_error": {
            "type": "object",
            "required": ["bin_width", "bin_edges", "counts", "mean", "std"],
        },
        "auc_roc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "auc_prc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "per_second": {"type": ["object", "null"]},
    },
    "$defs": {
        "metrics": {
            "type": "object",
            "required": ["accuracy", "sensitivity", "specificity", "precision", "f1"],
            "additionalProperties": {"type": ["number", "integer", "null"]},
        },
    },
}


def validate_report(report):
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


# --- artifacts --------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_artifacts(report, curves, out_dir):
    """CSV tables plus deterministic SVG renderings next to the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patients = report["patients"]
    _write_csv(out / "scatter.csv", ["record_id", "ahi_true", "ahi_pred"],
               [(p["record_id"], p["ahi_true"], p["ahi_pred"]) for p in patients])
    hist = report["ahi_error"]
    edges = hist["bin_edges"]
    _write_csv(out / "histogram.csv", ["bin_lo", "bin_hi", "count"],
               [(edges[i], edges[i + 1], c) for i, c in enumerate(hist["counts"])])
    if curves:
        _write_csv(out / "roc.csv", ["fpr", "tpr"], curves["roc"])
        _write_csv(out / "prc.csv", ["recall", "precision"], curves["prc"])
    _render_svgs(report, curves, out)


def _render_svgs(report, curves, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Date": None, "Creator": None}
    with matplotlib.rc_context({"svg.hashsalt": "apnea-bench", "svg.fonttype": "none"}):
        patients = report["patients"]
        x = np.array([p["ahi_true"] for p in patients])
        y = np.array([p["ahi_pred"] for p in patients])
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(x, y, s=12)
        reg = report["regression"].get("ahi", {})
        if "slope" in reg:
            xs = np.array([0.0, max(1.0, x.max())])
            ax.plot(xs, reg["slope"] * xs + reg["intercept"], color="red")
        ax.set_xlabel("expert AHI")
        ax.set_ylabel("predicted AHI")
        fig.savefig(out / "scatter.svg", metadata=meta)
        plt.close(fig)

        hist = report["ahi_error"]
        fig, ax = plt.subplots(figsize=(4, 3))
        edges = np.array(hist["bin_edges"])
        ax.bar(edges[:-1], hist["counts"], width=np.diff(edges), align="edge")
        ax.set_xlabel("AHI predicted - expert")
        fig.savefig(out / "histogram.svg", metadata=meta)
        plt.close(fig)

        for name, xlabel, ylabel in (("roc", "FPR", "TPR"), ("prc", "recall", "precision")):
            if name not in curves:
                continue
            pts = curves[name]
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.plot(pts[:, 0], pts[:, 1])
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            fig.savefig(out / f"{name}.svg", metadata=meta)
            plt.close(fig)


def metrics_block(counts_2x2):
    """Table-style metric block from a 2x2 ``[[TN, FP], [FN, TP]]`` matrix."""
    (tn, fp), (fn, tp) = np.asarray(counts_2x2)
    return metrics(int(tp), int(tn), int(fp), int(fn))
