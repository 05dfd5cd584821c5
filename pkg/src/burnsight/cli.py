"""Command-line surface: synthesize data, extract features, train, evaluate,
explain, and compare feature sets.

Every command is deterministic under its --seed. Exit codes are uniform:
0 success, 2 flag/validation error, 1 runtime failure. Stdout stays
machine-readable (comma-separated lines or bare paths) so the inspect-and-
retrain loop can be scripted; the PNG artifacts are for the human in front
of it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evalstats, explain, imaging, model, segmentation, texture
from .errors import BurnsightError


def thread_count() -> int:
    value = os.environ.get("BURNSIGHT_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise BurnsightError(f"BURNSIGHT_THREADS must be an integer, got {value!r}")
        if n < 1:
            raise BurnsightError("BURNSIGHT_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _parse_backbone(text: str) -> model.BackboneSource:
    if text == "builtin":
        return model.BackboneSource(kind="builtin-pool")
    if text.startswith("fvec:"):
        path = text[len("fvec:"):]
        if not path:
            raise ValueError("fvec backbone needs a path: fvec:PATH")
        return model.BackboneSource(kind="feature-file", path=path)
    raise ValueError(f"unknown backbone {text!r}; use builtin or fvec:PATH")


def _parse_segmenter(text: str, img: imaging.GrayImage) -> segmentation.SegmentMap:
    if text == "quickshift":
        return segmentation.segment_quickshift(img)
    if text == "felzenszwalb":
        return segmentation.segment_felzenszwalb(img)
    if text.startswith("grid:"):
        spec = text[len("grid:"):].lower()
        rows, _, cols = spec.partition("x")
        return segmentation.segment_grid(img, int(rows), int(cols))
    raise ValueError(f"unknown segmenter {text!r}; use quickshift, felzenszwalb, or grid:RxC")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burnsight",
        description="Texture-augmented grayscale classification with explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic speckle dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("features", help="write a feature file for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output .fvec path")
    p.add_argument("--kind", choices=["builtin", "glcm"], default="builtin")
    p.add_argument("--glcm", default="all", help="texture subset for --kind glcm")

    p = sub.add_parser("train", help="train the fusion classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", default="builtin", help="builtin or fvec:PATH")
    p.add_argument("--glcm", default="all",
                   help="none, all, or comma-separated feature names")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output checkpoint path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--fvec", default=None,
                   help="feature file for feature-file-backbone checkpoints")
    p.add_argument("--report", required=True, help="output report JSON path")

    p = sub.add_parser("runs", help="run a selections x seeds grid from a spec file")
    p.add_argument("--spec", required=True, help="runs spec JSON")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("explain", help="explain one image prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--segmenter", default="quickshift",
                   help="quickshift, felzenszwalb, or grid:RxC")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel-width", type=float, default=0.25)
    p.add_argument("--ridge", type=float, default=1.0)
    p.add_argument("--fill", default="segment-mean",
                   help="segment-mean or constant:VALUE")
    p.add_argument("--target-class", default=None,
                   help="class index or name; defaults to the predicted class")
    p.add_argument("--out", required=True, help="output artifact directory")

    p = sub.add_parser("compare", help="Tukey HSD over metric reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--metric", default="accuracy", choices=list(evalstats.METRIC_NAMES))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, help="output tukey CSV path")
    return parser


def cmd_synth(args, parser):
    if args.per_class < 1:
        parser.error("--per-class must be >= 1")
    if args.size < 32:
        parser.error("--size must be >= 32")
    cfg = imaging.SynthConfig(per_class_count=args.per_class, image_size=args.size,
                              seed=args.seed)
    imaging.generate_synthetic_dataset(cfg, args.out)
    print(os.path.join(args.out, "manifest.csv"))
    return 0


def cmd_features(args, parser):
    try:
        selection = texture.parse_selection(args.glcm)
    except ValueError as exc:
        parser.error(str(exc))
    manifest = imaging.load_manifest(args.manifest)
    workers = thread_count()
    if args.kind == "builtin":
        raw, _, _ = model.compute_feature_matrices(
            manifest, model.BackboneSource(kind="builtin-pool"), workers=workers
        )
        rows = raw
        meta = {"backbone": "builtin-pool"}
    else:
        if not selection:
            parser.error("--kind glcm needs a non-empty --glcm selection")
        glcm = texture.GlcmConfig()
        rows = np.array(
            [
                texture.texture_vector(
                    imaging.preprocess(imaging.load_image(e.path)), glcm, selection
                )
                for e in manifest.entries
            ]
        )
        meta = {"backbone": "glcm", "selection": list(selection)}
    meta["source_manifest"] = os.path.abspath(args.manifest)
    meta["preprocess"] = {"crop": [imaging.DEFAULT_CROP_WIDTH, imaging.DEFAULT_CROP_HEIGHT],
                          "resize": imaging.MODEL_INPUT_SIZE, "range": [0, 1]}
    model.save_feature_file(rows, args.out, metadata=meta)
    print(args.out)
    return 0


def cmd_train(args, parser):
    try:
        selection = texture.parse_selection(args.glcm)
        backbone = _parse_backbone(args.backbone)
        cfg = model.TrainConfig(
            epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
            seed=args.seed, selection=selection,
        )
    except ValueError as exc:
        parser.error(str(exc))
    manifest = imaging.load_manifest(args.manifest)
    trained, losses = model.train(manifest, backbone, cfg, workers=thread_count())
    model.save_checkpoint(trained, args.out, train_seed=args.seed)
    for epoch, loss in enumerate(losses):
        print(f"{epoch},{loss:.6f}")
    return 0


def cmd_eval(args, parser):
    manifest = imaging.load_manifest(args.manifest)
    loaded = model.load_checkpoint(args.model)
    if loaded.backbone.kind == "feature-file":
        if not args.fvec:
            parser.error("feature-file checkpoints need --fvec PATH at evaluation time")
        backbone = model.BackboneSource(kind="feature-file", path=args.fvec,
                                        dim=loaded.backbone.dim)
    else:
        backbone = loaded.backbone
    if tuple(loaded.classes) != imaging.CLASS_NAMES:
        raise BurnsightError(
            f"checkpoint class set {loaded.classes} does not match {imaging.CLASS_NAMES}"
        )
    eval_idx = manifest.split_indices(args.split)
    if not eval_idx:
        parser.error(f"manifest has no rows in split {args.split!r}")
    raw, tex, labels = model.compute_feature_matrices(
        manifest, backbone, workers=thread_count()
    )
    if raw.shape[1] != loaded.core.raw_dim:
        raise BurnsightError(
            f"backbone dim {raw.shape[1]} does not match checkpoint dim {loaded.core.raw_dim}"
        )
    aux = model.slice_selection(tex, loaded.selection)
    idx = np.array(eval_idx, dtype=np.intp)
    preds = np.argmax(loaded.core.logits(raw[idx], aux[idx]), axis=1)
    m = evalstats.confusion_and_metrics(preds, labels[idx], model.NUM_CLASSES)
    run = evalstats.RunMetrics(
        seed=loaded.train_seed,
        accuracy=m["accuracy"], precision=m["precision"],
        recall=m["recall"], f1=m["f1"],
        per_class_precision=m["per_class_precision"],
        per_class_recall=m["per_class_recall"],
        per_class_f1=m["per_class_f1"],
    )
    report = evalstats.MetricsReport(
        group=evalstats.selection_name(loaded.selection), runs=(run,)
    )
    evalstats.save_reports_json([report], args.report)
    print(f"accuracy,{m['accuracy']:.6f}")
    return 0


def cmd_runs(args, parser):
    with open(args.spec, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(args.spec))
    seeds = doc.get("seeds", [0, 1, 2, 3, 4, 5])
    if len(seeds) < 2:
        parser.error("runs spec needs at least 2 seeds for standard deviations")
    selections = doc.get("selections")
    if not selections:
        parser.error("runs spec needs a non-empty 'selections' list")
    try:
        parsed = [texture.parse_selection(s) for s in selections]
        backbone = _parse_backbone(doc.get("backbone", "builtin"))
    except ValueError as exc:
        parser.error(str(exc))
    manifest_path = doc.get("manifest")
    if not manifest_path:
        parser.error("runs spec needs a 'manifest' path")
    if not os.path.isabs(manifest_path):
        manifest_path = os.path.join(base, manifest_path)
    manifest = imaging.load_manifest(manifest_path)
    spec = evalstats.TrainEvalSpec(
        manifest=manifest,
        backbone=backbone,
        epochs=int(doc.get("epochs", 30)),
        batch_size=int(doc.get("batch_size", 8)),
        learning_rate=float(doc.get("learning_rate", 1e-5)),
        eval_split=doc.get("eval_split", "test"),
        train_per_class=doc.get("train_per_class"),
    )
    reports = evalstats.run_grid(spec, parsed, seeds, workers=thread_count())
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    table_path = os.path.join(args.out, "table1.csv")
    evalstats.save_reports_json(reports, report_path)
    evalstats.write_table1_csv(reports, table_path)
    print(report_path)
    print(table_path)
    return 0


def cmd_explain(args, parser):
    try:
        fill_mode, fill_value = _parse_fill(args.fill)
        cfg = explain.LimeConfig(
            num_samples=args.samples, kernel_width=args.kernel_width,
            ridge=args.ridge, top_k=args.topk, fill_mode=fill_mode,
            fill_value=fill_value, seed=args.seed,
        )
    except ValueError as exc:
        parser.error(str(exc))
    loaded = model.load_checkpoint(args.model)
    if loaded.backbone.kind != "builtin-pool":
        raise BurnsightError(
            "explain needs a checkpoint with the builtin backbone: feature-file "
            "models cannot score perturbed images"
        )
    img = imaging.preprocess(imaging.load_image(args.image))
    segmap = _parse_segmenter(args.segmenter, img)
    target = _parse_target_class(args.target_class, parser)
    predict = lambda im: model.predict_image(loaded, im).probabilities
    result = explain.explain_instance(
        predict, img, segmap, cfg, target_class=target, workers=thread_count()
    )
    saliency = None
    try:
        saliency = explain.gradient_saliency(loaded, img, result.target_class)
    except explain.ExplainError as exc:
        print(f"warning: saliency skipped: {exc}", file=sys.stderr)
    explain.write_explanation_artifacts(
        args.out, result, segmap, img, args.topk, saliency=saliency
    )
    print(args.out)
    return 0


def _parse_fill(text: str):
    if text == "segment-mean":
        return "segment-mean", 0.5
    if text.startswith("constant:"):
        return "constant", float(text[len("constant:"):])
    raise ValueError(f"unknown fill {text!r}; use segment-mean or constant:VALUE")


def _parse_target_class(text, parser):
    if text is None:
        return None
    if text in imaging.CLASS_NAMES:
        return imaging.CLASS_NAMES.index(text)
    try:
        idx = int(text)
    except ValueError:
        parser.error(f"--target-class must be an index or one of {imaging.CLASS_NAMES}")
    if not (0 <= idx < len(imaging.CLASS_NAMES)):
        parser.error(f"--target-class index {idx} out of range")
    return idx


def cmd_compare(args, parser):
    groups = {}
    for path in args.reports:
        for report in evalstats.load_reports_json(path):
            if report.group in groups:
                raise BurnsightError(f"duplicate group label {report.group!r} in {path}")
            groups[report.group] = report.values(args.metric)
    if len(groups) < 2:
        parser.error("need at least 2 groups to compare")
    results = evalstats.tukey_hsd(groups, alpha=args.alpha)
    evalstats.write_tukey_csv(results, args.out)
    print(args.out)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "runs": cmd_runs,
    "explain": cmd_explain,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, parser)
    except BurnsightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
