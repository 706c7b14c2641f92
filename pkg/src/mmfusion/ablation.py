"""Fusion-method comparison under shared hyperparameters, plus the missing-modality check."""

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import evaluate, mcnemar
from .model import FusionConfig, FusionModel
from .synth import SynthConfig
from .train import TrainConfig, train

METHODS = ("image_only", "clinical_only", "concat", "co_attention", "cross_attention_img_from_clin")
REFERENCE_KIND = "cross_attention_img_from_clin"
CSV_COLUMNS = ("method", "auc_roc", "f1", "accuracy", "precision", "recall", "mcnemar_p_vs_concat")

# Reference configuration for the method comparison, sized so the whole
# three-seed comparison fits a few CPU minutes: short schedule at a raised
# rate, no rotation or crop, light head dropout. Every method shares it,
# modality dropout included (off); the robustness check adds p=0.3 runs.
REFERENCE_SYNTH = {"n_samples": 2000, "image_size": 32, "interaction_weight": 0.7,
                   "image_weight": 0.15, "clinical_weight": 0.15}
REFERENCE_MODEL = {"classifier_dropout": 0.1, "modality_dropout_p": 0.0}
REFERENCE_TRAIN = {"lr": 1e-3, "max_epochs": 10, "rotation_deg": 0.0, "random_crop": False}
REFERENCE_SEEDS = (0, 1, 2)
# Modality-dropout rates compared for the reference kind in the robustness check.
ROBUSTNESS_P = (0.3, 0.0)


def reference_synth_config(seed=0):
    return SynthConfig.from_dict({**REFERENCE_SYNTH, "seed": seed})


@dataclass
class RunResult:
    method: str
    seed: int
    modality_dropout_p: float
    metrics: dict
    auc_clinical_zeroed: float
    predictions: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    epochs: int = 0
    seconds: float = 0.0


@dataclass
class AblationResult:
    runs: list
    robustness: list = field(default_factory=list)

    def median(self, method, key="auc_roc"):
        vals = [r.metrics[key] for r in self.runs if r.method == method]
        return float(np.median(vals))

    def median_drop(self, p):
        """Median AUC lost by the reference kind at dropout ``p`` when clinical input is zeroed."""
        runs = [r for r in self.robustness if r.modality_dropout_p == p]
        if not runs:
            raise KeyError(f"no robustness runs with modality_dropout_p={p}")
        return float(np.median([r.metrics["auc_roc"] - r.auc_clinical_zeroed for r in runs]))


def _fit_and_score(kind, seed, data, model_cfg, train_cfg, p=None):
    tr, va, te = data.split("train"), data.split("val"), data.split("test")
    mcfg = dict(model_cfg)
    mcfg["fusion_kind"] = kind
    if p is not None:
        mcfg["modality_dropout_p"] = p
    cfg = FusionConfig.from_dict(mcfg)
    model = FusionModel(cfg, data.vocab, seed=seed)
    tcfg = TrainConfig.from_dict({**train_cfg, "seed": seed})
    t = time.perf_counter()
    model, history = train(model, tr, va, tcfg)
    scores = model.predict_proba(te.images, te.clinical)
    rep = evaluate(scores, te.labels)
    zeroed = model.predict_proba(te.images, np.zeros_like(te.clinical))
    auc_zero = evaluate(zeroed, te.labels).auc_roc
    metrics = {k: getattr(rep, k) for k in ("auc_roc", "f1", "accuracy", "precision", "recall")}
    return RunResult(kind, seed, cfg.modality_dropout_p, metrics, auc_zero,
                     (scores >= 0.5).astype(np.int64), scores, len(history),
                     time.perf_counter() - t)


def run_ablation(data, model_cfg=None, train_cfg=None, seeds=REFERENCE_SEEDS, methods=METHODS,
                 robustness=False, out_dir=None, log=None, result=None):
    """Train every method on every seed and score it on the test split.

    With ``robustness`` the reference kind is also trained at each rate in
    ``ROBUSTNESS_P`` not already covered by the main runs, and every variant
    is scored with the clinical input zeroed.
    Per-run JSON files are written as runs finish and runs are appended to
    ``result`` (if given) in place, so a failure keeps everything completed so far.
    """
    model_cfg = dict(REFERENCE_MODEL if model_cfg is None else model_cfg)
    train_cfg = dict(REFERENCE_TRAIN if train_cfg is None else train_cfg)
    result = AblationResult([]) if result is None else result
    if out_dir:
        os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)

    def record(run, bucket, tag):
        bucket.append(run)
        if out_dir:
            path = os.path.join(out_dir, "runs", f"{tag}_seed{run.seed}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump({"method": run.method, "seed": run.seed,
                           "modality_dropout_p": run.modality_dropout_p, "metrics": run.metrics,
                           "auc_clinical_zeroed": run.auc_clinical_zeroed, "epochs": run.epochs},
                          fh, indent=2, sort_keys=True)
                fh.write("\n")
        if log:
            log(run, tag)

    for seed in seeds:
        for kind in methods:
            record(_fit_and_score(kind, seed, data, model_cfg, train_cfg), result.runs, kind)
        if robustness:
            for p in ROBUSTNESS_P:
                ref = [r for r in result.runs if r.method == REFERENCE_KIND and r.seed == seed
                       and r.modality_dropout_p == p]
                if ref:
                    result.robustness.append(ref[0])
                else:
                    run = _fit_and_score(REFERENCE_KIND, seed, data, model_cfg, train_cfg, p=p)
                    record(run, result.robustness, f"{REFERENCE_KIND}_p{p:g}")
    return result


def summary_rows(result, labels):
    """One row per method: median metrics over seeds and median McNemar p vs concat."""
    rows = []
    methods = list(dict.fromkeys(r.method for r in result.runs))
    for m in methods:
        runs = [r for r in result.runs if r.method == m]
        row = {"method": m}
        for k in CSV_COLUMNS[1:-1]:
            row[k] = float(np.median([r.metrics[k] for r in runs]))
        ps = []
        for r in runs:
            base = [c for c in result.runs if c.method == "concat" and c.seed == r.seed]
            if base:
                ps.append(mcnemar(r.predictions, base[0].predictions, labels)[2])
        row["mcnemar_p_vs_concat"] = float(np.median(ps)) if ps else float("nan")
        rows.append(row)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (row[k] if k == "method" else repr(float(row[k]))) for k in CSV_COLUMNS})


def write_runs_csv(path, result, labels):
    cols = ("method", "seed", "modality_dropout_p", "auc_roc", "f1", "accuracy", "precision",
            "recall", "auc_clinical_zeroed", "mcnemar_b", "mcnemar_c", "mcnemar_p_vs_concat")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        seen = set()
        for r in result.runs + result.robustness:
            key = (r.method, r.seed, r.modality_dropout_p)
            if key in seen:
                continue
            seen.add(key)
            base = [c for c in result.runs if c.method == "concat" and c.seed == r.seed]
            b, c, p = mcnemar(r.predictions, base[0].predictions, labels) if base else ("", "", "")
            w.writerow([r.method, r.seed, repr(r.modality_dropout_p)]
                       + [repr(float(r.metrics[k])) for k in CSV_COLUMNS[1:-1]]
                       + [repr(float(r.auc_clinical_zeroed)), b, c, p if p == "" else repr(float(p))])

