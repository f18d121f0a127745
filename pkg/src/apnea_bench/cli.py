"""Command-line entry point: synth | preprocess | train | predict | evaluate | pipeline.

Every command reads a flat ``key = value`` config (optional), applies the
``APNEA_BENCH_SEED`` environment variable and then ``--set key=value``
overrides, and writes the resolved config next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from .errors import (ApneaBenchError, ConfigError, DataError, MissingReference,
                     NumericError)
from .evaluate import (ConfusionMatrix, build_report, evaluate_record, metrics,
                       validate_report, write_artifacts)
from .postprocess import SmoothingConfig, smooth
from .preprocess import PreprocessConfig, preprocess_record, training_epochs
from .record_io import (events_to_timeline, load_events, load_record, save_events,
                        save_record, save_report, timeline_to_events)
from .synthgen import SynthConfig, annotation_path, make_corpus, read_manifest
from .trainer import (BoostStage, CascadeConfig, TrainConfig, map_labels, n_classes_for,
                      predict_record, run_cascade, train_main)

log = logging.getLogger("apnea_bench")

SEED_ENV = "APNEA_BENCH_SEED"

# key -> (type, default)
CONFIG_KEYS = {
    "seed": (int, 0),
    "task": (str, "binary"),
    # synthetic corpus
    "records": (int, 20),
    "split": (str, "0.8,0.1,0.1"),
    "duration_s": (float, 7200.0),
    "sample_rate_hz": (float, 125.0),
    "noise_std": (float, 0.05),
    # preprocessing
    "notch_hz": (float, 60.0),
    "lowpass_hz": (float, 10.0),
    "clip_lo_pct": (float, 1.0),
    "clip_hi_pct": (float, 99.0),
    "train_stride_s": (int, 30),
    "val_stride_s": (int, 30),
    "preprocessed": (bool, False),
    # network and optimizer
    "n_layers": (int, 12),
    "n_filters": (int, 32),
    "dropout_p": (float, 0.2),
    "learning_rate": (float, 1e-3),
    "batch_size": (int, 32),
    "max_steps": (int, 1000),
    "stage_max_steps": (int, 0),
    "eval_every": (int, 50),
    "patience": (int, 5),
    # cascade
    "balance_ratio": (float, 3.0),
    "max_stages": (int, 10),
    "first_tpr": (float, 0.995),
    "tpr_step": (float, 0.010),
    "min_removed_frac": (float, 0.005),
    # smoothing and evaluation
    "window_s": (int, 10),
    "noevent_quorum": (int, 3),
    "merge_min_total_windows": (int, 2),
    "median_event_s": (float, 18.0),
    "hist_bin_width": (float, 2.5),
    # paths
    "data_dir": (str, "data"),
    "preprocessed_dir": (str, "preprocessed"),
    "checkpoint_dir": (str, "checkpoint"),
    "predictions_dir": (str, "predictions"),
    "report_dir": (str, "report"),
}


def _parse_value(key, text):
    kind, _ = CONFIG_KEYS[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _set(cfg, key, text, origin):
    key = key.strip()
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r} ({origin})")
    cfg[key] = _parse_value(key, text)


def load_config(path=None, overrides=(), env=None):
    """Defaults < config file < $APNEA_BENCH_SEED < ``--set`` overrides."""
    env = os.environ if env is None else env
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            _set(cfg, k, v, f"{path}:{n}")
    if env.get(SEED_ENV):
        _set(cfg, "seed", env[SEED_ENV], SEED_ENV)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set(cfg, k, v, "--set")
    if cfg["task"] not in ("binary", "multiclass"):
        raise ConfigError(f"task must be binary or multiclass, got {cfg['task']!r}")
    return cfg


def write_resolved(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.items()]
    (out / "config.resolved.txt").write_text("".join(lines))


def _split_fracs(cfg):
    try:
        fracs = tuple(float(x) for x in cfg["split"].split(","))
    except ValueError:
        raise ConfigError(f"bad split {cfg['split']!r}") from None
    if len(fracs) != 3:
        raise ConfigError("split needs three fractions: train,val,test")
    return fracs


def _preprocess_config(cfg):
    try:
        return PreprocessConfig(notch_hz=cfg["notch_hz"], lowpass_hz=cfg["lowpass_hz"],
                                clip_lo_pct=cfg["clip_lo_pct"], clip_hi_pct=cfg["clip_hi_pct"],
                                train_stride_s=cfg["train_stride_s"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg, max_steps=None):
    return TrainConfig(n_layers=cfg["n_layers"], n_filters=cfg["n_filters"],
                       dropout_p=cfg["dropout_p"], learning_rate=cfg["learning_rate"],
                       batch_size=cfg["batch_size"],
                       max_steps=max_steps or cfg["max_steps"],
                       eval_every=cfg["eval_every"], patience=cfg["patience"],
                       seed=cfg["seed"])


def _smoothing_config(cfg):
    try:
        return SmoothingConfig(window_s=cfg["window_s"], noevent_quorum=cfg["noevent_quorum"],
                               merge_min_total_windows=cfg["merge_min_total_windows"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _load_prepared(path, cfg):
    """Record at 10 Hz (preprocessing it unless already done) and its events."""
    rec = load_record(path)
    events = load_events(annotation_path(path), rec.duration_s)
    if not cfg["preprocessed"]:
        rec = preprocess_record(rec, _preprocess_config(cfg))
    return rec, events


# --- commands ---------------------------------------------------------------

def cmd_synth(cfg, out_dir):
    template = SynthConfig(seed=cfg["seed"], duration_s=cfg["duration_s"],
                           sample_rate_hz=cfg["sample_rate_hz"], noise_std=cfg["noise_std"])
    manifests = make_corpus(cfg["records"], template, _split_fracs(cfg), out_dir=out_dir)
    write_resolved(cfg, out_dir)
    log.info("synth: %s", {k: len(v) for k, v in manifests.items()})
    return {name: Path(out_dir) / f"{name}.txt" for name in manifests}


def _preprocess_one(args):
    path, out_dir, cfg = args
    rec, events = _load_prepared(path, cfg)
    sig = Path(out_dir) / "records" / Path(path).name
    save_record(rec, sig)
    save_events(events, annotation_path(sig))
    return sig


def cmd_preprocess(cfg, manifests, out_dir, jobs=1):
    """Preprocess every manifest's records; writes manifests of the same names."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    written = {}
    for manifest in manifests:
        paths = read_manifest(manifest)
        sigs = _pool_map(_preprocess_one, [(p, out, cfg) for p in paths], jobs)
        name = Path(manifest).name
        (out / name).write_text("".join(s.relative_to(out).as_posix() + "\n" for s in sigs))
        written[Path(manifest).stem] = out / name
    write_resolved({**cfg, "preprocessed": True}, out)
    return written


def _epochs_one(args):
    path, cfg, stride_s = args
    rec, events = _load_prepared(path, cfg)
    windows, labels = training_epochs(rec, events, stride_s)
    return np.array(windows), map_labels(labels, cfg["task"])


def _epochs(manifest, cfg, stride_s, jobs):
    parts = _pool_map(_epochs_one, [(p, cfg, stride_s) for p in read_manifest(manifest)], jobs)
    if not parts:
        raise DataError(f"{manifest}: empty manifest")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def cmd_train(cfg, train_manifest, val_manifest, out_dir, jobs=1):
    """Cascade stages plus the main model, saved to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    X, y = _epochs(train_manifest, cfg, cfg["train_stride_s"], jobs)
    Xv, yv = _epochs(val_manifest, cfg, cfg["val_stride_s"], jobs)
    ccfg = CascadeConfig(task, cfg["balance_ratio"], cfg["max_stages"], cfg["first_tpr"],
                         cfg["tpr_step"], cfg["min_removed_frac"])
    stage_cfg = _train_config(cfg, cfg["stage_max_steps"] or None)
    cascade = run_cascade(X, y, Xv, yv, ccfg, stage_cfg)
    main_params, main_hist = train_main(X[cascade.train_keep], y[cascade.train_keep],
                                        Xv[cascade.val_keep], yv[cascade.val_keep],
                                        task, _train_config(cfg))

    thresholds = []
    with open(out / "train_log.ndjson", "w") as log_fh:
        for st in cascade.stages:
            nn.save_model(st.params, out / f"stage_{st.stage_index}.model")
            thresholds.append({"stage": st.stage_index, "threshold": st.rejection_threshold,
                               "target_tpr": st.target_tpr, "val_tpr": st.val_tpr,
                               "pool_before": st.pool_before, "pool_after": st.pool_after})
            for rec in st.history:
                log_fh.write(json.dumps({"model": f"stage_{st.stage_index}", **rec}) + "\n")
        for rec in main_hist:
            log_fh.write(json.dumps({"model": "main", **rec}) + "\n")
        summary = {"model": "summary", "task": task, "n_stages": len(cascade.stages),
                   "initial_ratio": cascade.initial_ratio, "final_ratio": cascade.final_ratio,
                   "max_stages_hit": cascade.max_stages_hit,
                   "n_train_epochs": int(len(X)), "n_main_epochs": int(cascade.train_keep.sum())}
        log_fh.write(json.dumps(summary) + "\n")
    nn.save_model(main_params, out / "main.model")
    save_report({"task": task, "stages": thresholds}, out / "thresholds.json")
    write_resolved(cfg, out)
    log.info("train: %d stages, ratio %.2f -> %.2f", len(cascade.stages),
             cascade.initial_ratio, cascade.final_ratio)
    return out


def load_checkpoint(ckpt_dir):
    ckpt = Path(ckpt_dir)
    try:
        meta = json.loads((ckpt / "thresholds.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{ckpt}: unreadable thresholds.json ({exc})") from None
    stages = []
    for st in meta["stages"]:
        params = nn.load_model(ckpt / f"stage_{st['stage']}.model")
        stages.append(BoostStage(st["stage"], params, st["threshold"], st["target_tpr"],
                                 st["val_tpr"], st["pool_before"], st["pool_after"]))
    return meta["task"], stages, nn.load_model(ckpt / "main.model")


def _predict_one(args):
    path, cfg, ckpt_dir, out_dir = args
    task, stages, main = load_checkpoint(ckpt_dir)
    rec = load_record(path)
    if not cfg["preprocessed"]:
        rec = preprocess_record(rec, _preprocess_config(cfg))
    probs = predict_record(stages, main, rec.samples)
    smoothed = smooth(probs.argmax(axis=1), _smoothing_config(cfg))
    out = Path(out_dir)
    save_events(timeline_to_events(smoothed), out / f"{rec.record_id}.pred.ndjson")
    header = "second," + ",".join(f"p{c}" for c in range(probs.shape[1]))
    np.savetxt(out / f"{rec.record_id}.probs.csv", np.column_stack((np.arange(len(probs)), probs)),
               delimiter=",", header=header, comments="", fmt=["%d"] + ["%.6f"] * probs.shape[1])
    return rec.record_id


def cmd_predict(cfg, ckpt_dir, manifest, out_dir, jobs=1):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, _, main = load_checkpoint(ckpt_dir)
    if main.arch.n_classes != n_classes_for(task):
        raise DataError(f"{ckpt_dir}: main model has {main.arch.n_classes} classes for task {task}")
    ids = _pool_map(_predict_one, [(p, cfg, ckpt_dir, out) for p in read_manifest(manifest)], jobs)
    save_report({"task": task, "records": sorted(ids)}, out / "predictions.json")
    write_resolved(cfg, out)
    return out


def _evaluate_one(args):
    rid, path, pred_dir, task, cfg = args
    pred_dir = Path(pred_dir)
    rec = load_record(path)
    duration = rec.duration_s
    reference = load_events(annotation_path(path), duration)
    predicted = load_events(pred_dir / f"{rid}.pred.ndjson", duration)
    probs_path = pred_dir / f"{rid}.probs.csv"
    probs = np.loadtxt(probs_path, delimiter=",", skiprows=1, ndmin=2)[:, 1:] \
        if probs_path.exists() else None
    truth = events_to_timeline(reference, duration)
    smoothed = events_to_timeline(predicted, duration)
    return evaluate_record(rid, reference, predicted, duration, rec.sleep_hours, task,
                           probs, truth, smoothed, cfg["median_event_s"])


def cmd_evaluate(cfg, pred_dir, manifest, out_dir, jobs=1):
    pred_dir = Path(pred_dir)
    try:
        meta = json.loads((pred_dir / "predictions.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{pred_dir}: unreadable predictions.json ({exc})") from None
    refs = {Path(p).stem: p for p in read_manifest(manifest)}
    missing = [rid for rid in meta["records"] if rid not in refs]
    if missing:
        raise MissingReference(f"no reference for predicted records {missing}")
    jobs_args = [(rid, refs[rid], pred_dir, meta["task"], cfg) for rid in meta["records"]]
    results = _pool_map(_evaluate_one, jobs_args, jobs)
    report, curves = build_report(results, cfg["median_event_s"], cfg["hist_bin_width"])
    validate_report(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json")
    write_artifacts(report, curves, out)
    write_resolved(cfg, out)
    return report


def fixture_counts(name):
    """Bundled published confusion counts, e.g. ``exp1_mgh`` or ``exp2_mgh``."""
    data = json.loads(resources.files("apnea_bench").joinpath("fixtures/published_counts.json").read_text())
    if name not in data:
        raise ConfigError(f"unknown fixture {name!r}; have {sorted(data)}")
    return ConfusionMatrix(data[name]["counts"], tuple(data[name]["labels"]))


def metrics_table(conf: ConfusionMatrix):
    """Table-style block: overall metrics plus one row per event class."""
    rows = {"overall": conf.overall()}
    if conf.n_classes > 2:
        for c in range(1, conf.n_classes):
            rows[conf.labels[c]] = metrics(*conf.one_vs_rest(c))
    return rows


def _format_table(rows):
    keys = ("accuracy", "sensitivity", "specificity", "precision", "f1")
    lines = ["{:<12}".format("") + "".join(f"{k:>12}" for k in keys)]
    for name, m in rows.items():
        cells = "".join(f"{'n/a':>12}" if m[k] is None else f"{100 * m[k]:>11.1f}%" for k in keys)
        lines.append(f"{name:<12}{cells}")
    return "\n".join(lines)


def cmd_pipeline(cfg, work_dir, jobs=1):
    work = Path(work_dir)
    data = work / cfg["data_dir"]
    manifests = cmd_synth(cfg, data)
    prepared = cmd_preprocess(cfg, list(manifests.values()), work / cfg["preprocessed_dir"], jobs)
    cfg = {**cfg, "preprocessed": True}
    ckpt = cmd_train(cfg, prepared["train"], prepared["val"], work / cfg["checkpoint_dir"], jobs)
    preds = cmd_predict(cfg, ckpt, prepared["test"], work / cfg["predictions_dir"], jobs)
    return cmd_evaluate(cfg, preds, prepared["test"], work / cfg["report_dir"], jobs)


# --- entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="apnea-bench", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="record-level worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--records", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", help="train,val,test fractions")

    s = sub.add_parser("preprocess", help="resample and normalize records")
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="fit the cascade and main model")
    s.add_argument("--train", required=True, help="training manifest")
    s.add_argument("--val", required=True, help="validation manifest")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--task", choices=("binary", "multiclass"))

    s = sub.add_parser("predict", help="score records with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="score predictions against references")
    s.add_argument("--predictions")
    s.add_argument("--manifest", help="reference manifest")
    s.add_argument("--out")
    s.add_argument("--fixture", help="print the metric block of bundled counts instead")

    s = sub.add_parser("pipeline", help="synth, preprocess, train, predict, evaluate")
    s.add_argument("--out", required=True, help="work directory")
    s.add_argument("--task", choices=("binary", "multiclass"))
    s.add_argument("--records", type=int)
    s.add_argument("--seed", type=int)
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    for key in ("records", "seed", "split", "task"):
        val = getattr(args, key, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    cfg = load_config(args.config, overrides)
    jobs = max(1, args.jobs)

    if args.command == "synth":
        cmd_synth(cfg, args.out)
    elif args.command == "preprocess":
        cmd_preprocess(cfg, args.manifest, args.out, jobs)
    elif args.command == "train":
        cmd_train(cfg, args.train, args.val, args.out, jobs)
    elif args.command == "predict":
        cmd_predict(cfg, args.checkpoint, args.manifest, args.out, jobs)
    elif args.command == "evaluate":
        if args.fixture:
            print(_format_table(metrics_table(fixture_counts(args.fixture))))
        else:
            if not (args.predictions and args.manifest and args.out):
                raise ConfigError("evaluate needs --predictions, --manifest and --out")
            report = cmd_evaluate(cfg, args.predictions, args.manifest, args.out, jobs)
            print(_format_table({"overall": report["overall_metrics"]}))
    elif args.command == "pipeline":
        report = cmd_pipeline(cfg, args.out, jobs)
        print(_format_table({"overall": report["overall_metrics"]}))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ApneaBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
