"""``mmfusion`` command line: synth, train, eval, explain, ablate, gradcheck.

Every command writes files into its ``--out`` directory and prints ``key=value`` summary lines on stdout.
Exit codes: 0 success, 1 internal or numeric failure, 2 usage or input error.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import ablation, explain
from . import autodiff as ad
from .clinical import FIELDS, EncodingError, IngestError
from .gradcheck import run_suite
from .metrics import evaluate, roc_curve
from .model import CheckpointError, FusionConfig, FusionModel, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate, load_dataset
from .train import TrainConfig, train

log = logging.getLogger("mmfusion")


class InputError(Exception):
    """Bad arguments, missing files or malformed inputs (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_json_config(path, cls, label):
    """Strict JSON config: unknown keys are an input error."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {label} config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise InputError(f"{label} config {path} must be a JSON object")
    try:
        cls.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{label} config {path}: {exc}") from None
    return obj


def _dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError, IngestError, EncodingError) as exc:
        raise InputError(f"cannot load dataset {path}: {exc}") from None


def _model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from None


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out, command, config, seeds, inputs, started):
    """Run manifest: command, resolved config, seeds, input hashes, version, wall-clock time."""
    write_json(os.path.join(out, "manifest.json"), {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "input_sha256": {k: sha256_file(v) for k, v in inputs.items()},
        "tool_version": tool_version(),
        "wall_clock_seconds": round(time.time() - started, 3),
    })


def emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    obj = load_json_config(args.config, SynthConfig, "synth")
    obj["seed"] = args.seed
    cfg = SynthConfig.from_dict(obj)
    # the dataset manifest (config echo, seed, Bayes ceilings) doubles as the run
    # manifest; it carries no timing so that equal seeds give identical bytes
    ds = generate(cfg, args.out)
    b = ds.meta["bayes"]
    emit(phase="synth", n=len(ds), positives=int(ds.labels.sum()), bayes_auc=f"{b['auc']:.4f}",
         out=args.out)


def write_history(path, history):
    cols = ("epoch", "train_loss", "val_loss", "val_auc", "lr")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def cmd_train(args):
    started = time.time()
    mobj = load_json_config(args.model_config, FusionConfig, "model")
    tobj = load_json_config(args.train_config, TrainConfig, "train")
    tobj["seed"] = args.seed
    ds = _dataset(args.data)
    mcfg = FusionConfig.from_dict(mobj)
    if mcfg.uses_image and ds.images.shape[-1] != mcfg.image_size:
        raise InputError(f"model image_size {mcfg.image_size} != dataset {ds.images.shape[-1]}")
    tcfg = TrainConfig.from_dict(tobj)
    model = FusionModel(mcfg, ds.vocab, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    model, history = train(model, ds.split("train"), ds.split("val"), tcfg,
                           callback=lambda r: log.info("epoch %d val_loss %.4f", r["epoch"], r["val_loss"]))
    save_checkpoint(os.path.join(args.out, "checkpoint.mmfx"), model)
    write_history(os.path.join(args.out, "history.csv"), history)
    inputs = {"data": args.data}
    if args.model_config:
        inputs["model_config"] = args.model_config
    if args.train_config:
        inputs["train_config"] = args.train_config
    write_manifest(args.out, "train", {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                   [args.seed], inputs, started)
    best = min(history, key=lambda r: r["val_loss"]) if history else None
    emit(phase="train", epochs=len(history), best_epoch=best["epoch"] if best else 0,
         best_val_loss=f"{best['val_loss']:.6f}" if best else "nan", out=args.out)


def cmd_eval(args):
    started = time.time()
    model = _model(args.checkpoint)
    ds = _dataset(args.data)
    if model.vocab != ds.vocab:
        raise InputError("checkpoint vocabulary does not match the dataset")
    part = ds.split(args.split)
    scores = model.predict_proba(part.images, part.clinical)
    rep = evaluate(scores, part.labels, bootstrap=args.bootstrap, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    out = rep.to_json()
    out["split"] = args.split
    out["bootstrap_resamples"] = args.bootstrap
    write_json(os.path.join(args.out, "metrics.json"), out)
    fpr, tpr, thr = roc_curve(scores, part.labels)
    with open(os.path.join(args.out, "roc.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for a, b, t in zip(fpr, tpr, thr):
            w.writerow((repr(float(a)), repr(float(b)), repr(float(t))))
    write_manifest(args.out, "eval", {"split": args.split, "bootstrap": args.bootstrap},
                   [args.seed], {"checkpoint": args.checkpoint, "data": args.data}, started)
    emit(phase="eval", split=args.split, n=rep.n, auc_roc=f"{rep.auc_roc:.6f}",
         accuracy=f"{rep.accuracy:.6f}", f1=f"{rep.f1:.6f}")


def cmd_explain(args):
    started = time.time()
    model = _model(args.checkpoint)
    ds = _dataset(args.data)
    try:
        i = ds.index_of(args.sample)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    image = ds.images[i] if model.config.uses_image else None
    clinical = ds.clinical[i]
    os.makedirs(args.out, exist_ok=True)
    fill = ds.meta.get("image_mean", 0.0)
    summary = {}
    if args.method == "gradcam":
        if not model.config.uses_image:
            raise InputError("gradcam needs a model with an image branch")
        cam = explain.grad_cam(model, image, clinical, class_index=args.class_index)
        explain.write_heatmap_csv(os.path.join(args.out, "gradcam_heatmap.csv"), cam.upsampled)
        explain.write_overlay_ppm(os.path.join(args.out, "gradcam_overlay.ppm"), image[0], cam.upsampled)
        explain.write_json(os.path.join(args.out, "gradcam.json"), {
            "method": "gradcam", "class": cam.class_index, "sample": args.sample,
            "score": cam.score, "channel_weights": cam.channel_weights.tolist(),
            "raw_map": cam.raw.tolist(), "shape": list(cam.upsampled.shape)})
        summary = {"max_heat": f"{float(cam.raw.max()):.6f}"}
    elif args.method in ("shap", "kernelshap"):
        mm = explain.MaskableModel(model, image, clinical, fill, class_index=args.class_index)
        if args.method == "shap":
            att = explain.shapley_exact(None, len(FIELDS), batch_fn=mm.clinical_values,
                                        feature_names=list(FIELDS))
        else:
            att = explain.kernel_shap(None, len(FIELDS), args.n_samples, seed=args.seed,
                                      batch_fn=mm.clinical_values, feature_names=list(FIELDS))
        explain.write_json(os.path.join(args.out, f"{args.method}.json"), explain.attribution_json(
            args.method, args.class_index, att.phi, list(FIELDS), att.efficiency_residual,
            seed=args.seed if args.method == "kernelshap" else None, sample=args.sample,
            f_x=att.f_x, f_baseline=att.f_baseline, baseline=att.baseline))
        summary = {"efficiency_residual": f"{att.efficiency_residual:.3e}"}
    else:
        if args.lime_features == "image":
            if not model.config.uses_image:
                raise InputError("image LIME needs a model with an image branch")
            h, w = image.shape[-2:]
            try:
                seg = explain.superpixel_segments(h, w, args.grid)
            except explain.ExplainError as exc:
                raise InputError(str(exc)) from None
            mm = explain.MaskableModel(model, image, clinical, fill, seg, args.class_index)
            M = args.grid * args.grid
            names = list(range(M))
            res = explain.lime_explain(mm.image_values, M, args.n_samples, K=args.top_k, seed=args.seed)
            heat = np.maximum(res.coefficients, 0.0)[seg]
            explain.write_overlay_ppm(os.path.join(args.out, "lime_overlay.ppm"), image[0], heat)
        else:
            mm = explain.MaskableModel(model, image, clinical, fill, class_index=args.class_index)
            M = len(FIELDS)
            names = list(FIELDS)
            res = explain.lime_explain(mm.clinical_values, M, args.n_samples, K=args.top_k, seed=args.seed)
        explain.write_json(os.path.join(args.out, "lime.json"), explain.attribution_json(
            "lime", args.class_index, res.coefficients, names, r2=res.r2, seed=args.seed,
            sample=args.sample, intercept=res.intercept, kernel_width=res.kernel_width,
            n_perturbations=res.n_perturbations, selected=res.selected, features=args.lime_features))
        summary = {"r2": f"{res.r2:.6f}"}
    write_manifest(args.out, "explain", {"method": args.method, "sample": args.sample,
                                         "class": args.class_index},
                   [args.seed], {"checkpoint": args.checkpoint, "data": args.data}, started)
    emit(phase="explain", method=args.method, sample=args.sample, **summary)


def cmd_ablate(args):
    started = time.time()
    mobj = load_json_config(args.model_config, FusionConfig, "model") if args.model_config \
        else dict(ablation.REFERENCE_MODEL)
    tobj = load_json_config(args.train_config, TrainConfig, "train") if args.train_config \
        else dict(ablation.REFERENCE_TRAIN)
    mobj.pop("fusion_kind", None)
    tobj.pop("seed", None)
    ds = _dataset(args.data)
    seeds = [args.seed + k for k in range(args.n_seeds)]
    os.makedirs(args.out, exist_ok=True)
    labels = ds.split("test").labels

    def progress(run, tag):
        emit(phase="ablate_run", method=tag, seed=run.seed, auc_roc=f"{run.metrics['auc_roc']:.6f}")

    result = ablation.AblationResult([])
    try:
        ablation.run_ablation(ds, mobj, tobj, seeds, robustness=args.robustness,
                              out_dir=args.out, log=progress, result=result)
    finally:
        if result.runs:
            ablation.write_ablation_csv(os.path.join(args.out, "ablation.csv"),
                                        ablation.summary_rows(result, labels))
            ablation.write_runs_csv(os.path.join(args.out, "ablation_runs.csv"), result, labels)
    write_manifest(args.out, "ablate", {"model": mobj, "train": tobj, "robustness": args.robustness},
                   seeds, {"data": args.data}, started)
    best = max(ablation.summary_rows(result, labels), key=lambda r: r["auc_roc"])
    extra = {}
    if args.robustness:
        extra = {f"drop_p{p:g}": f"{result.median_drop(p):.6f}" for p in ablation.ROBUSTNESS_P}
    emit(phase="ablate", methods=len(ablation.METHODS), seeds=len(seeds), best=best["method"],
         best_auc=f"{best['auc_roc']:.6f}", **extra)


def cmd_gradcheck(args):
    results = run_suite(seeds=range(args.seed, args.seed + args.n_seeds))
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  seed={r.seed}  max_rel_err={r.max_error:.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    emit(phase="gradcheck", checks=len(results), failed=len(failed),
         max_error=f"{max(r.max_error for r in results):.3e}")
    return 1 if failed else 0


# -- entry point -------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mmfusion", description="Multimodal image + clinical fusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--bootstrap", type=int, default=1000, help="bootstrap resamples (0 disables)")
    e.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="explain one prediction")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", required=True)
    x.add_argument("--method", required=True, choices=("gradcam", "shap", "kernelshap", "lime"))
    x.add_argument("--out", required=True)
    x.add_argument("--class", dest="class_index", type=int, default=1, choices=(0, 1))
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--n-samples", type=int, default=1000,
                   help="coalitions for kernelshap, perturbations for lime")
    x.add_argument("--lime-features", choices=("image", "clinical"), default="image")
    x.add_argument("--grid", type=int, default=4, help="superpixel grid size for image LIME")
    x.add_argument("--top-k", type=int, default=None)
    x.set_defaults(func=cmd_explain)

    a = sub.add_parser("ablate", help="compare fusion methods under shared hyperparameters")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--n-seeds", type=int, default=1)
    a.add_argument("--model-config")
    a.add_argument("--train-config")
    a.add_argument("--robustness", action="store_true",
                   help="pair the cross-attention model at modality dropout 0.3 and 0 and "
                        "report the AUC lost with clinical input zeroed")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and model head")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except InputError as exc:
        print(f"mmfusion: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = args.func(args)
        return 0 if rc is None else rc
    except InputError as exc:
        print(f"mmfusion: error: {exc}", file=sys.stderr)
        return 2
    except (ad.NonFiniteError, ArithmeticError) as exc:
        print(f"mmfusion: numeric failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"mmfusion: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
