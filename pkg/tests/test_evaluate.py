import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from sklearn.base import clone

from apnea_bench.errors import DegenerateDesign, SingleClassInput, ZeroSleepHours
from apnea_bench.evaluate import (REPORT_SCHEMA, ConfusionMatrix, PatientSummary,
                                  RobustLinearRegression, ahi_error_histogram, ahi_rdi,
                                  build_report, evaluate_record, event_confusion, metrics,
                                  pearson_r2, robust_fit, roc_prc, severity, validate_report,
                                  write_artifacts)
from apnea_bench.record_io import AnnotationEvent as Ev
from apnea_bench.record_io import events_to_timeline


def test_metrics_formulas():
    m = metrics(tp=1, tn=1, fp=0, fn=0)
    assert all(v == 1.0 for v in m.values())
    m = metrics(tp=0, tn=5, fp=0, fn=3)
    assert m["precision"] is None
    assert m["f1"] is None
    assert m["sensitivity"] == 0.0
    m = metrics(3, 4, 2, 1)
    assert m["accuracy"] == pytest.approx(0.7)
    assert m["sensitivity"] == pytest.approx(0.75)
    assert m["specificity"] == pytest.approx(4 / 6)
    assert m["precision"] == pytest.approx(0.6)
    assert m["f1"] == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert metrics(0, 0, 0, 0)["accuracy"] is None


def test_confusion_marginals():
    cm = ConfusionMatrix([[50, 2, 3], [4, 10, 1], [0, 2, 8]])
    tp, tn, fp, fn = cm.one_vs_rest(1)
    assert (tp, fn, fp) == (10, 5, 4)
    assert tp + tn + fp + fn == 80
    norm = cm.normalized()
    assert np.allclose(norm.sum(1), 1, atol=1e-9)
    assert np.array_equal((cm + cm).counts, 2 * cm.counts)
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 0]])


def test_normalized_zero_row():
    norm = ConfusionMatrix([[5, 0], [0, 0]]).normalized()
    assert norm[1].tolist() == [0.0, 0.0]


# --- ROC --------------------------------------------------------------------

def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    won = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0)
              for p in pos for q in neg)
    return won / (len(pos) * len(neg))


def test_auc_examples():
    r = roc_prc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
    assert r["auc_roc"] == pytest.approx(0.75)
    r = roc_prc([0.9, 0.8, 0.1], [1, 1, 0])
    assert r["auc_roc"] == 1.0
    assert r["auc_prc"] == 1.0
    assert r["roc_points"][0].tolist() == [0.0, 0.0]
    assert r["roc_points"][-1].tolist() == [1.0, 1.0]
    assert r["prc_points"][0].tolist() == [0.0, 1.0]
    with pytest.raises(SingleClassInput):
        roc_prc([0.1, 0.2], [1, 1])


def test_auc_random_labels_is_half():
    rng = np.random.default_rng(0)
    r = roc_prc(rng.random(10_000), rng.integers(0, 2, 10_000))
    assert abs(r["auc_roc"] - 0.5) < 0.02


def test_auc_exhaustive_pairwise():
    rng = np.random.default_rng(1)
    for n in range(2, 13):
        # a coarse grid gives plenty of ties
        scores = rng.integers(0, 4, n) / 4
        labelings = itertools.product((0, 1), repeat=n) if n <= 8 else (
            rng.integers(0, 2, n) for _ in range(200))
        for labels in labelings:
            labels = list(labels)
            if 0 < sum(labels) < n:
                got = roc_prc(scores, labels)["auc_roc"]
                assert abs(got - float(pairwise_auc(scores, labels))) < 1e-12


# --- AHI and severity -----------------------------------------------------------

def events_of(counts):
    evs, t = [], 0.0
    for cls, n in counts.items():
        for _ in range(n):
            evs.append(Ev(t, 10.0, cls))
            t += 20
    return evs


def test_ahi_rdi_arithmetic():
    evs = events_of({1: 10, 2: 5, 4: 15, 3: 6})
    r = ahi_rdi(evs, 6.0)
    assert r["ahi"] == pytest.approx(5.0)
    assert r["rdi"] == pytest.approx(6.0)
    assert r["rates"]["rera"] == pytest.approx(1.0)
    assert ahi_rdi([], 3.0)["ahi"] == 0
    with pytest.raises(ZeroSleepHours):
        ahi_rdi(evs, 0)


def test_rdi_never_below_ahi():
    rng = np.random.default_rng(3)
    for _ in range(200):
        counts = {c: int(rng.integers(0, 20)) for c in (1, 2, 3, 4)}
        r = ahi_rdi(events_of(counts), float(rng.uniform(0.5, 9)))
        assert r["rdi"] >= r["ahi"]


def test_severity_bins():
    assert severity(4.9) == "normal"
    assert severity(5.0) == "mild"
    assert severity(14.99) == "mild"
    assert severity(15) == "moderate"
    assert severity(30) == "severe"
    assert severity(31) == "severe"
    order = ["normal", "mild", "moderate", "severe"]
    values = [order.index(severity(a)) for a in np.linspace(0, 60, 601)]
    assert values == sorted(values)


# --- robust regression -----------------------------------------------------------

def test_robust_exact_line():
    x = np.arange(10.0)
    fit = robust_fit(x, 2 * x + 1)
    assert abs(fit.slope - 2) < 1e-9
    assert abs(fit.intercept - 1) < 1e-9
    assert abs(fit.r_squared - 1) < 1e-9
    assert fit.converged


def test_robust_resists_outliers():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 50, 200)
    y = 2 * x + rng.normal(0, 1, 200)
    bad = rng.choice(200, 20, replace=False)
    y[bad] += 50
    fit = robust_fit(x, y)
    assert abs(fit.slope - 2) < 0.02
    assert fit.weights[bad].max() < 0.05
    assert 0 <= fit.r_squared <= 1
    ols = np.polyfit(x, y, 1)
    assert abs(ols[0] - 2) > abs(fit.slope - 2)


def test_robust_huge_tuning_is_ols():
    rng = np.random.default_rng(2)
    x = rng.normal(size=50)
    y = 3 * x - 1 + rng.normal(size=50)
    fit = robust_fit(x, y, tuning=1e9)
    slope, icpt = np.polyfit(x, y, 1)
    assert abs(fit.slope - slope) < 1e-9
    assert abs(fit.intercept - icpt) < 1e-9


def test_robust_degenerate():
    with pytest.raises(DegenerateDesign):
        robust_fit([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(DegenerateDesign):
        robust_fit([1, 2], [1, 2])


def test_robust_estimator():
    x = np.arange(20.0)[:, None]
    est = RobustLinearRegression()
    assert clone(est).get_params() == est.get_params()
    est.fit(x, 4 * x[:, 0] - 2)
    assert est.coef_[0] == pytest.approx(4)
    assert est.predict([[1.0]]) == pytest.approx([2.0])


def test_pearson_r2():
    assert pearson_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1)
    assert pearson_r2([1, 1, 1], [2, 4, 6]) is None


# --- histogram ----------------------------------------------------------------

def summary(rid, t, p):
    return PatientSummary(rid, t, p, t, p, {}, {}, severity(t), severity(p))


def test_histogram_perfect_predictions():
    h = ahi_error_histogram([summary(str(i), a, a) for i, a in enumerate([1, 7, 20])], 2.5)
    assert h["counts"] == [3]
    assert h["bin_edges"] == [-1.25, 1.25]
    assert h["std"] == 0.0
    assert h["mean"] == 0.0


def test_histogram_symmetric_and_std():
    d = [-3.0, 3.0, -1.0, 1.0]
    h = ahi_error_histogram(d, 2.0)
    assert h["mean"] == 0
    n = len(d)
    mean = sum(d) / n
    textbook = (sum((v - mean) ** 2 for v in d) / (n - 1)) ** 0.5
    assert h["std"] == pytest.approx(textbook)
    assert sum(h["counts"]) == 4
    centers = [(a + b) / 2 for a, b in zip(h["bin_edges"], h["bin_edges"][1:])]
    assert all(abs(c / 2 - round(c / 2)) < 1e-12 for c in centers)


# --- confusion from events ------------------------------------------------------

def test_event_confusion_binary_and_multiclass():
    ref = [Ev(100, 20, 2), Ev(200, 20, 4), Ev(300, 20, 3), Ev(400, 20, 1)]
    pred = [Ev(100, 20, 2), Ev(200, 20, 1), Ev(600, 20, 4)]
    cm = event_confusion(pred, ref, 3600, "multiclass")
    m = cm.counts
    assert m[2, 2] == 1            # central matched
    assert m[4, 1] == 1            # hypopnea called obstructive
    assert m[3, 0] == 1 and m[1, 0] == 1
    assert m[0, 4] == 1            # prediction on regular breathing
    # the misclassified prediction sits on reference time, so only one FP adds busy time
    assert m[0, 0] == int((3600 - 80 - 20) // 18)

    cb = event_confusion([Ev(100, 20, 1), Ev(200, 20, 1), Ev(600, 20, 1)], ref, 3600, "binary")
    # RERA is not an event in the binary task
    assert cb.counts[1].tolist() == [1, 2]
    assert cb.counts[0, 1] == 1


def test_self_evaluation_is_perfect():
    ref = [Ev(100, 20, 2), Ev(200, 30, 4)]
    cm = event_confusion(ref, ref, 1000, "multiclass")
    ov = cm.overall()
    assert ov["sensitivity"] == 1.0
    assert cm.counts[0, 1:].sum() == 0


def fake_results(task, n=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        ref = [Ev(100.0 + 60 * k, 20.0, int(rng.integers(1, 5))) for k in range(i + 2)]
        pred = [e for e in ref if rng.random() < 0.8]
        if task == "binary":
            pred = [Ev(e.start_s, e.duration_s, 1) for e in pred if e.event_class != 3]
        dur = 1200.0
        truth = events_to_timeline(ref, dur)
        probs = np.zeros((1200, 2 if task == "binary" else 5))
        probs[:, 0] = 1 - (truth > 0) * rng.uniform(0.3, 1, 1200)
        probs[:, 1] = 1 - probs[:, 0]
        out.append(evaluate_record(f"r{i}", ref, pred, dur, dur / 3600, task, probs, truth,
                                   events_to_timeline(pred, dur)))
    return out


@pytest.mark.parametrize("task", ["binary", "multiclass"])
def test_report_schema_and_artifacts(task, tmp_path):
    report, curves = build_report(fake_results(task))
    validate_report(report)
    blob = json.loads(json.dumps(report))
    validate_report(blob)
    assert blob["report_version"] == 1
    rows = np.array(report["event_confusion"]["normalized"])
    nz = np.array(report["event_confusion"]["absolute"]).sum(1) > 0
    assert np.allclose(rows[nz].sum(1), 1, atol=1e-9)
    if task == "multiclass":
        assert set(report["regression"]) >= {"ahi", "rdi", "central", "rera"}
    write_artifacts(report, curves, tmp_path / "a")
    write_artifacts(report, curves, tmp_path / "b")
    for name in ("scatter.csv", "histogram.csv", "roc.csv", "prc.csv", "scatter.svg",
                 "histogram.svg", "roc.svg", "prc.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_schema_rejects_bad_report():
    import jsonschema
    report, _ = build_report(fake_results("binary"))
    report["report_version"] = 2
    with pytest.raises(jsonschema.ValidationError):
        validate_report(report)
    assert REPORT_SCHEMA["properties"]["report_version"]["const"] == 1


def test_severity_accuracy_in_report():
    res = fake_results("binary", n=8, seed=3)
    report, _ = build_report(res)
    sev = np.array(report["severity"]["confusion"])
    assert sev.sum() == 8
    assert report["severity"]["accuracy"] == pytest.approx(np.trace(sev) / 8)
