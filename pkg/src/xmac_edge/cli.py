"""``xmac`` command-line entry point.

Structured outputs are JSON, rasters are PNG, and report figures are written
next to the JSON they summarize.  Errors are reported on stderr as a single
line ``error: <ExceptionType>: <message>`` with exit code 1; usage errors exit
with code 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import explain as ex
from .autodiff import Rng
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    DatasetError,
    LabeledSample,
    SplitError,
    SynthConfig,
    dataset_arrays,
    load_dataset,
    make_synthetic_dataset,
    sample_arrays,
    write_dataset,
)
from .metrics import (
    DegenerateClassError,
    DegenerateVarianceError,
    classification_report,
    confusion_matrix,
    paired_t_test,
    roc_curve,
    auc,
)
from .model import AttentionSpec, ConfigError, ModelConfig, build_model, forward, parameter_count
from .pngio import ImageFormatError, read_image, write_image, write_png_array
from .training import TrainConfig, TrainingDivergedError, evaluate, holdout_split, run_kfold, train
from .vegindex import MissingBandError, mcari, ndvi, normalize_index, npci

log = logging.getLogger("xmac_edge")

RUNTIME_ERRORS = (
    CheckpointError,
    ConfigError,
    DatasetError,
    SplitError,
    ImageFormatError,
    MissingBandError,
    TrainingDivergedError,
    DegenerateVarianceError,
    ex.InsufficientSamplesError,
    ex.TooManyFeaturesError,
    FileNotFoundError,
    ValueError,
    OSError,
)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(args, image_size: int, num_classes: int) -> ModelConfig:
    cfg = ModelConfig(
        input_size=(image_size, image_size),
        num_classes=num_classes,
        index_branch_enabled=not args.no_index_branch,
        attention=AttentionSpec(enabled=not args.no_attention),
    )
    cfg.validate()
    return cfg


def _train_config(args, image_size: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        early_stop_patience=args.patience,
        seed=args.seed,
        image_size=image_size,
        nir_proxy=args.nir_proxy,
    )


def _image_size(args, dataset: Dataset) -> int:
    if args.image_size:
        return args.image_size
    return int(min(min(s.image.height, s.image.width) for s in dataset.samples))


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    kw = dict(image_size=args.image_size, seed=args.seed)
    if args.task == "nir-only":
        cfg = SynthConfig.nir_only_task(**kw)
    elif args.task == "lesion":
        cfg = SynthConfig.lesion_task(**kw)
    else:
        cfg = SynthConfig(**kw)
    ds = make_synthetic_dataset(cfg, args.n_per_class)
    write_dataset(ds, args.out)
    print(json.dumps({"root": str(args.out), "samples": len(ds), "classes": ds.class_names}))
    return 0


def cmd_indices(args) -> int:
    img = read_image(args.image, args.nir)
    if args.nir_proxy:
        img = img.with_nir_proxy()
    out = _outdir(args)
    summary = {}
    for fn in (ndvi, npci, mcari):
        raw = fn(img)
        norm = normalize_index(raw)
        write_png_array(norm.values, out / f"{raw.kind.lower()}.png", bitdepth=16)
        summary[raw.kind] = {
            "raw_min": float(raw.values.min()),
            "raw_max": float(raw.values.max()),
            "raw_mean": float(raw.values.mean()),
        }
    _write_json(out / "indices.json", {"image": str(args.image), "nir_proxy": bool(args.nir_proxy), "indices": summary})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training_curves

    data = load_dataset(args.data)
    if args.val_data:
        fit, val = data, load_dataset(args.val_data)
    else:
        fit, val = holdout_split(data, args.val_fraction, args.seed)
    size = _image_size(args, data)
    model = build_model(_model_config(args, size, data.num_classes), Rng(args.seed).child(3))
    best, hist = train(model, fit, val, _train_config(args, size))
    out = _outdir(args)
    save_checkpoint(best, out / "checkpoint.xmac")
    h = hist.to_json()
    h["class_names"] = data.class_names
    _write_json(out / "history.json", h)
    plot_training_curves(h, out / "training_curves.png")
    print(json.dumps({"checkpoint": str(out / "checkpoint.xmac"), "best_epoch": hist.best_epoch,
                      "stop_reason": hist.stop_reason}))
    return 0


def _bench(model, rgb, idx) -> dict:
    x = rgb[:1]
    i = idx[:1] if model.config.index_branch_enabled else None
    for _ in range(10):
        forward(model, x, i)
    times = []
    for _ in range(100):
        t0 = time.perf_counter()
        forward(model, x, i)
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "median_ms": statistics.median(times),
        "min_ms": min(times),
        "max_ms": max(times),
        "methodology": "median of 100 single-image forward passes (batch 1, inference mode) after 10 warmup passes",
        "threads": _threads(),
    }


def cmd_eval(args) -> int:
    from .plotting import plot_confusion_matrix, plot_roc

    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if data.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, checkpoint has {model.config.num_classes}")
    size = model.config.input_size[0]
    pred, probs = evaluate(model, data, size, args.nir_proxy)
    y = data.labels()
    cm = confusion_matrix(y, pred, data.num_classes, data.class_names)
    rep = classification_report(cm)
    roc, skipped = {}, {}
    curves = {}
    for c, name in enumerate(data.class_names):
        try:
            cur = roc_curve(y, probs, c)
        except DegenerateClassError as exc:
            skipped[name] = str(exc)
            continue
        curves[name] = cur
        roc[name] = {"fpr": cur.fpr.tolist(), "tpr": cur.tpr.tolist(), "auc": auc(cur)}
    out = _outdir(args)
    _write_json(out / "report.json", rep.to_json())
    _write_json(out / "confusion_matrix.json", cm.to_json())
    _write_json(out / "roc.json", {"curves": roc, "skipped": skipped})
    plot_confusion_matrix(cm, out / "confusion_matrix.png")
    if curves:
        from .metrics import RocResult

        plot_roc(RocResult(curves, {k: v["auc"] for k, v in roc.items()}), out / "roc.png")
    print(rep.format())
    if args.bench:
        rgb, idx, _ = dataset_arrays(data.subset([0]), size, args.nir_proxy)
        b = _bench(model, rgb, idx)
        _write_json(out / "bench.json", b)
        print(f"latency: median {b['median_ms']:.2f} ms ({b['methodology']}; threads={b['threads']})")
    return 0


def cmd_kfold(args) -> int:
    from .plotting import plot_kfold

    data = load_dataset(args.data)
    size = _image_size(args, data)
    base = dict(input_size=(size, size), num_classes=data.num_classes)
    configs = {"full": ModelConfig(**base)}
    for name in args.ablations.split(",") if args.ablations else []:
        if name == "no_index":
            configs[name] = ModelConfig(**base, index_branch_enabled=False)
        elif name == "no_attention":
            configs[name] = ModelConfig(**base, attention=AttentionSpec(enabled=False))
        else:
            raise ValueError(f"unknown ablation {name!r}; choose from no_index, no_attention")
    for c in configs.values():
        c.validate()
    res = run_kfold(data, configs, _train_config(args, size), k=args.k)
    table = res.to_json()
    tests = {}
    for j, name in enumerate(res.config_names[1:], start=1):
        a, b = res.accuracy[:, 0], res.accuracy[:, j]
        ok = ~(np.isnan(a) | np.isnan(b))
        try:
            tests[f"full_vs_{name}"] = paired_t_test(a[ok], b[ok]).to_json()
        except (DegenerateVarianceError, ValueError) as exc:
            tests[f"full_vs_{name}"] = {"error": f"{type(exc).__name__}: {exc}"}
    table["paired_t_tests"] = tests
    table["mean_accuracy"] = {n: float(np.nanmean(res.accuracy[:, j])) for j, n in enumerate(res.config_names)}
    out = _outdir(args)
    _write_json(out / "kfold.json", table)
    plot_kfold(res.accuracy, res.config_names, out / "kfold.png")
    print(json.dumps({"mean_accuracy": table["mean_accuracy"], "paired_t_tests": tests}, sort_keys=True))
    return 0


def _load_single(args, model):
    img = read_image(args.image, args.nir)
    sample = LabeledSample(img, 0, "", "real")
    rgb, idx = sample_arrays(sample, model.config.input_size[0], args.nir_proxy)
    return rgb, idx


def _target_class(args, model, rgb, idx) -> int:
    if args.target_class is not None:
        return args.target_class
    out = forward(model, rgb[None], idx[None] if model.config.index_branch_enabled else None)
    return int(np.argmax(out.probabilities.data[0]))


def cmd_explain_gradcam(args) -> int:
    from .plotting import plot_saliency
    from .vegindex import MultibandImage

    model = load_checkpoint(args.checkpoint)
    rgb, idx = _load_single(args, model)
    c = _target_class(args, model, rgb, idx)
    sm = ex.gradcam_pp(model, rgb, idx if model.config.index_branch_enabled else None, c)
    shown = MultibandImage.from_arrays(*rgb.astype(np.float64))
    over = ex.overlay_heatmap(shown, sm, args.alpha)
    out = _outdir(args)
    write_image(over, out / "overlay.png")
    _write_json(out / "saliency.json", sm.to_json())
    plot_saliency(rgb, sm.values, out / "saliency_plot.png", f"Grad-CAM++ class {c}")
    print(json.dumps({"target_class": c, "overlay": str(out / "overlay.png")}))
    return 0


def _background(args, model) -> np.ndarray | None:
    if not args.background_data:
        return None
    ds = load_dataset(args.background_data)
    rgb, idx, _ = dataset_arrays(ds, model.config.input_size[0], args.nir_proxy)
    return ex.plane_means(rgb, idx)


def _feature_spec(args, h, w) -> ex.FeatureSpec:
    if args.features == "channels":
        return ex.FeatureSpec.channels(h, w)
    return ex.FeatureSpec.patches(h, w, args.patch_size)


def cmd_explain_shap(args) -> int:
    from .plotting import plot_channel_shap

    model = load_checkpoint(args.checkpoint)
    fn = ex.model_predict_fn(model, args.output)
    bg = _background(args, model)
    h, w = model.config.input_size
    spec = _feature_spec(args, h, w)
    out = _outdir(args)
    rng = Rng(args.seed)

    def explain_one(rgb, idx, c, key):
        if args.mode == "brute-force":
            return ex.exact_shapley(fn, rgb, idx, spec, c, bg)
        return ex.kernel_shap(fn, rgb, idx, spec, c, args.n_samples, rng.child(key), args.mode, bg)

    if args.image:
        rgb, idx = _load_single(args, model)
        c = _target_class(args, model, rgb, idx)
        att = explain_one(rgb, idx, c, 0)
        doc = att.to_json()
        doc["seed"] = args.seed
        doc["output"] = args.output
        doc["background"] = "training-mean" if bg is not None else "constant-0.5"
        _write_json(out / "shap.json", doc)
        if spec.mode == "channels":
            plot_channel_shap(att.values[None], att.feature_ids, [f"class {c}"], out / "shap.png")
        print(json.dumps({"class": c, "base_value": att.base_value, "sum": float(np.sum(att.values))}))
        return 0

    if spec.mode != "channels":
        raise ValueError("dataset-level aggregation needs --features channels")
    data = load_dataset(args.data)
    rgb, idx, y = dataset_arrays(data, h, args.nir_proxy)
    atts = [explain_one(rgb[i], idx[i], int(y[i]), i) for i in range(len(y))]
    table = ex.aggregate_channel_shap(atts)
    doc = table.to_json(data.class_names)
    doc.update(mode=args.mode, n_samples=args.n_samples if args.mode == "sampled" else None,
               seed=args.seed, output=args.output)
    _write_json(out / "channel_shap.json", doc)
    plot_channel_shap(table.means, table.feature_ids, [data.class_names[c] for c in table.classes],
                      out / "channel_shap.png")
    print(json.dumps({"classes": len(table.classes), "attributions": len(atts)}))
    return 0


def cmd_info(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        s = args.image_size or 224
        model = build_model(ModelConfig(input_size=(s, s), num_classes=args.num_classes), 0)
    n = parameter_count(model)
    doc = {
        "parameter_count": n,
        "preset": model.config.preset,
        "config": model.config.to_dict(),
        "rgb_output_shape": list(model.config.rgb_output_shape()),
        "index_output_shape": list(model.config.index_output_shape()),
    }
    if args.out:
        _write_json(_outdir(args) / "info.json", doc)
    print(f"parameters: {n}")
    print(json.dumps(doc, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def _add_model_flags(p):
    p.add_argument("--no-index-branch", action="store_true", help="disable the vegetation-index branch")
    p.add_argument("--no-attention", action="store_true", help="disable the self-attention block")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--patience", type=int, default=10, help="early-stop patience in epochs")
    p.add_argument("--image-size", type=int, default=None, help="square crop size (default: smallest image side)")


def _add_image_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="RGB PNG to explain")
    if p.prog.endswith("shap"):
        src.add_argument("--data", help="dataset root; aggregates channel attributions per class")
    p.add_argument("--nir", default=None, help="optional NIR companion PNG")
    p.add_argument("--class", dest="target_class", type=int, default=None, help="target class (default: predicted)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmac", description="Dual-branch leaf disease classifier runtime")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=20)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--task", choices=["default", "nir-only", "lesion"], default="default")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("indices", help="write NDVI/NPCI/MCARI maps for an image")
    s.add_argument("image")
    s.add_argument("--nir", default=None)
    s.add_argument("--nir-proxy", action="store_true", help="use the green band when NIR is absent")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_indices)

    s = sub.add_parser("train", help="train a model and write the best checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--val-data", default=None)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--nir-proxy", action="store_true")
    _add_model_flags(s)
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="classification report, confusion matrix and ROC")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nir-proxy", action="store_true")
    s.add_argument("--bench", action="store_true", help="also time single-image inference")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("kfold", help="k-fold comparison of the full model against ablations")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--ablations", default="no_index,no_attention")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--nir-proxy", action="store_true")
    _add_train_flags(s)
    s.set_defaults(func=cmd_kfold)

    e = sub.add_parser("explain", help="saliency and attribution")
    esub = e.add_subparsers(dest="explainer", required=True)
    g = esub.add_parser("gradcam", help="Grad-CAM++ overlay")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--alpha", type=float, default=0.5)
    g.add_argument("--nir-proxy", action="store_true")
    g.add_argument("--seed", type=int, default=0, help="accepted for symmetry; Grad-CAM++ is deterministic")
    _add_image_flags(g)
    g.set_defaults(func=cmd_explain_gradcam)

    k = esub.add_parser("shap", help="Kernel SHAP or exact Shapley attributions")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--mode", choices=["sampled", "exact", "brute-force"], default="sampled",
                   help="sampled Kernel SHAP, exact Kernel SHAP over all coalitions, or brute-force Shapley")
    k.add_argument("--n-samples", type=int, default=2048)
    k.add_argument("--features", choices=["channels", "patches"], default="channels")
    k.add_argument("--patch-size", type=int, default=None,
                   help="patch side in pixels (default: smallest size giving at most 196 patches)")
    k.add_argument("--output", choices=["probability", "logit"], default="probability")
    k.add_argument("--background-data", default=None, help="dataset whose per-plane means replace masked features")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--nir-proxy", action="store_true")
    _add_image_flags(k)
    k.set_defaults(func=cmd_explain_shap)

    s = sub.add_parser("info", help="parameter count and configuration")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--image-size", type=int, default=None, help="preset input size when no checkpoint is given")
    s.add_argument("--num-classes", type=int, default=6)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_info)
    return p


def _threads() -> int:
    raw = os.environ.get("XMAC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"XMAC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"XMAC_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except RUNTIME_ERRORS as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
