"""Command-line entry point: ``zsd {split,synth,train,predict,eval}``.

Every run writes into ``<out>/<run-name>/`` (``--out`` defaults to
``$ZSD_OUTPUT_ROOT`` or ``runs``) and starts by persisting its resolved
configuration as ``config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data_io import (build_training_set, generate_synthetic, load_features, load_manifest, load_split,
                      make_split, save_manifest, write_features)
from .embeddings import (build_open_vocabulary, load_embeddings, load_token_list, sniff_dim,
                         write_embeddings)
from .evaluation import ALL, EvalConfig, detect_all, evaluate, gzsd_evaluate
from .model import ProjectionModel, load_model, save_model
from .trainers import (LabConfig, TrainConfig, augment_dses, train_baseline, train_lab, train_sb)

log = logging.getLogger("zsd")

OUTPUT_ROOT_ENV = "ZSD_OUTPUT_ROOT"
STRATEGIES = ("baseline", "sb", "lab", "dses")


class CLIError(Exception):
    pass


def _k_list(text: str) -> list[int | None]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(ALL if tok.lower() == "all" else int(tok))
    return out


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsd", description="Zero-shot detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default=None, help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")
        sp.add_argument("--run-name", default=None)
        sp.add_argument("--config", default=None, help="JSON file with option overrides")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("split", help="cluster class vectors into seen/unseen sets")
    common(sp)
    sp.add_argument("--classes", required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--dim", type=int, default=None)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--unseen-frac", type=float, default=0.2)
    sp.add_argument("--restarts", type=int, default=20)

    sp = sub.add_parser("synth", help="generate a synthetic detection task")
    common(sp)
    sp.add_argument("--seen", type=int, default=40)
    sp.add_argument("--unseen", type=int, default=10)
    sp.add_argument("--open", type=int, default=50)
    sp.add_argument("--d1", type=int, default=32)
    sp.add_argument("--d2", type=int, default=16)
    sp.add_argument("--images", type=int, default=500)
    sp.add_argument("--test-images", type=int, default=100)
    sp.add_argument("--regions", type=int, default=3)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--background-per-image", type=int, default=6)
    sp.add_argument("--test-background-per-image", type=int, default=200)

    def data(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--features", required=True)
        sp.add_argument("--embeddings", required=True)
        sp.add_argument("--dim", type=int, default=None)
        sp.add_argument("--split", required=True)

    sp = sub.add_parser("train", help="train a projection model")
    common(sp)
    data(sp)
    sp.add_argument("--strategy", choices=STRATEGIES, default="baseline")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--margin", type=float, default=1.0)
    sp.add_argument("--recon-weight", type=float, default=1e-3)
    sp.add_argument("--negatives-per-image", type=int, default=3)
    sp.add_argument("--filter-unseen-images", action="store_true",
                    help="drop training images that contain any unseen object")
    sp.add_argument("--eligible", default=None, help="token list restricting the open vocabulary")
    sp.add_argument("--niters", type=int, default=5)
    sp.add_argument("--lab-fraction", type=float, default=None)
    sp.add_argument("--lab-epochs", type=int, default=1)
    sp.add_argument("--lr-decay", type=float, default=10.0)
    sp.add_argument("--decay-every", type=int, default=2)
    sp.add_argument("--aux-manifest", default=None)
    sp.add_argument("--aux-features", default=None)

    def detect(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--proposal-score-min", type=float, default=0.07)
        sp.add_argument("--nms-iou", type=float, default=0.4)
        sp.add_argument("--classes-set", choices=("unseen", "seen", "all"), default="unseen")
        sp.add_argument("--gzsd", action="store_true")
        sp.add_argument("--nt", type=float, default=0.2)
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("predict", help="dump detections for a manifest")
    common(sp)
    data(sp)
    detect(sp)

    sp = sub.add_parser("eval", help="Recall@K / mAP / GZSD report")
    common(sp)
    data(sp)
    detect(sp)
    sp.add_argument("--k-values", type=_k_list, default=[ALL, 100, 80, 50])
    sp.add_argument("--tp-iou", type=_floats, default=[0.4, 0.5, 0.6])
    sp.add_argument("--gzsd-k", type=int, default=100)
    sp.add_argument("--gzsd-iou", type=float, default=0.5)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    known = set(vars(args)) - {"command", "config"}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise CLIError(f"unknown config keys: {unknown}")
    for k, v in overrides.items():
        setattr(args, k, v)
    return args


def _run_dir(args) -> Path:
    root = Path(args.out or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    d = root / (args.run_name or args.command)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(run_dir: Path, args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _store(args):
    return load_embeddings(args.embeddings, args.dim or sniff_dim(args.embeddings))


def cmd_split(args) -> int:
    run = _run_dir(args)
    _write_config(run, args)
    store = _store(args)
    classes = load_token_list(args.classes)
    missing = [c for c in classes if c not in store]
    if missing:
        raise CLIError(f"classes without embeddings: {missing[:10]}")
    split = make_split(classes, store, args.k, args.unseen_frac, args.seed, restarts=args.restarts)
    (run / "split.json").write_text(split.to_json(), encoding="utf-8")
    unseen = set(split.unseen)
    for c, members in split.clusters().items():
        u = [t for t in members if t in unseen]
        print(f"cluster {c}: {len(members)} classes, {len(members) - len(u)} seen, {len(u)} unseen: "
              f"{' '.join(u)}")
    print(f"seen={len(split.seen)} unseen={len(split.unseen)} -> {run / 'split.json'}")
    return 0


def cmd_synth(args) -> int:
    run = _run_dir(args)
    _write_config(run, args)
    task = generate_synthetic(args.seen, args.unseen, args.open, args.d1, args.d2, args.images, args.regions,
                              args.sigma, args.seed, test_images=args.test_images,
                              background_per_image=args.background_per_image,
                              test_background_per_image=args.test_background_per_image)
    write_embeddings(run / "embeddings.txt", task.store)
    write_features(run / "features.zsdf", task.features)
    save_manifest(run / "train_manifest.json", task.train)
    save_manifest(run / "test_manifest.json", task.test)
    save_manifest(run / "gzsd_manifest.json", task.gzsd_test)
    (run / "open.txt").write_text("".join(t + "\n" for t in task.open), encoding="utf-8")
    (run / "split.json").write_text(json.dumps({"seed": args.seed, "K_clusters": 0, "seen": task.seen,
                                                "unseen": task.unseen}, indent=2) + "\n", encoding="utf-8")
    hidden = {"background_rows": sorted(task.background_rows),
              "labels": {str(k): v for k, v in sorted(task.hidden_labels.items())}}
    (run / "hidden_labels.json").write_text(json.dumps(hidden) + "\n", encoding="utf-8")
    print(f"synthetic task -> {run}")
    return 0


def cmd_train(args) -> int:
    run = _run_dir(args)
    _write_config(run, args)
    store = _store(args)
    split = load_split(args.split)
    features = load_features(args.features)
    manifest = load_manifest(args.manifest, len(features))
    if args.filter_unseen_images:
        manifest = manifest.without_images_containing(split.unseen)
    ts = build_training_set(manifest, features, split.seen, args.negatives_per_image, args.seed,
                            unseen_classes=split.unseen)
    model = ProjectionModel.init(features.shape[1], store.dim, args.seed, margin=args.margin,
                                 recon_weight=args.recon_weight)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)

    if args.strategy == "baseline":
        model, report = train_baseline(ts.positives, model, store, split.seen, cfg, unseen=split.unseen)
    elif args.strategy == "sb":
        model, report = train_sb(ts.sb_samples(), model, store, split.seen, cfg, unseen=split.unseen)
    elif args.strategy == "dses":
        if not (args.aux_manifest and args.aux_features):
            raise CLIError("dses needs --aux-manifest and --aux-features")
        aux_X = load_features(args.aux_features)
        aux = load_manifest(args.aux_manifest, len(aux_X))
        aux_ts = build_training_set(aux, aux_X, set(aux.classes) - set(split.unseen),
                                    args.negatives_per_image, args.seed, unseen_classes=split.unseen)
        classes, samples = augment_dses(split.seen, ts.positives, aux.classes, aux_ts.positives, split.unseen)
        model, report = train_baseline(samples, model, store, classes, cfg, unseen=split.unseen)
        report.strategy = "dses"
        report.sample_counts["auxiliary"] = len(aux_ts.positives)
    else:
        eligible = load_token_list(args.eligible) if args.eligible else store.tokens
        vocab = build_open_vocabulary(store.tokens, split.seen, split.unseen, eligible)
        model, report = train_baseline(ts.positives, model, store, split.seen, cfg, unseen=split.unseen)
        lab_cfg = LabConfig(niters=args.niters, sample_fraction=args.lab_fraction,
                            epochs_per_iter=args.lab_epochs, lr_decay=args.lr_decay,
                            decay_every=args.decay_every)
        pre_epochs = (report.epoch_loss, report.epoch_hinge)
        model, report, _ = train_lab(ts.positives, ts.background, model, store, split.seen, vocab.open,
                                     cfg, lab_cfg, unseen=split.unseen)
        report.epoch_loss = pre_epochs[0] + report.epoch_loss
        report.epoch_hinge = pre_epochs[1] + report.epoch_hinge
    report.sample_counts.update({f"build.{k}": v for k, v in ts.counts.items()})

    save_model(run / "model.zsdm", model)
    (run / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (run / "report.log").write_text(report.to_log(), encoding="utf-8")
    final = report.epoch_hinge[-1] if report.epoch_hinge else float("nan")
    print(f"{args.strategy}: {len(report.epoch_loss)} epochs, final hinge {final:.4f} -> {run / 'model.zsdm'}")
    return 0


def _load_eval_inputs(args):
    store = _store(args)
    split = load_split(args.split)
    model = load_model(args.model)
    features = load_features(args.features)
    if model.d2 != store.dim:
        raise CLIError(f"checkpoint D2={model.d2} does not match embedding dim {store.dim}")
    if model.d1 != features.shape[1]:
        raise CLIError(f"checkpoint D1={model.d1} does not match feature dim {features.shape[1]}")
    manifest = load_manifest(args.manifest, len(features))
    return store, split, model, features, manifest


def _classes(split, which: str) -> list[str]:
    return {"unseen": split.unseen, "seen": split.seen, "all": sorted(split.seen + split.unseen)}[which]


def _write_detections(path: Path, manifest, detections) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for im, dets in zip(manifest.images, detections):
            for d in sorted(dets, key=lambda d: -d.score):
                b = d.box
                fh.write(f"{im.image_id}\t{d.label}\t{d.score:.6f}\t{b.x1:.2f}\t{b.y1:.2f}\t{b.x2:.2f}\t{b.y2:.2f}\n")


def _detections(args, store, split, model, features, manifest):
    eval_cfg = EvalConfig(proposal_score_min=args.proposal_score_min, nms_iou=args.nms_iou)
    images = manifest.proposals_for(features)
    if args.gzsd:
        summary, dets = gzsd_evaluate(model, images, manifest.ground_truth(), split.seen, split.unseen, store,
                                      args.nt, k=getattr(args, "gzsd_k", 100),
                                      tp_iou=getattr(args, "gzsd_iou", 0.5), config=eval_cfg,
                                      workers=args.workers)
        return dets, summary
    return detect_all(model, images, _classes(split, args.classes_set), store, eval_cfg, args.workers), None


def cmd_predict(args) -> int:
    run = _run_dir(args)
    _write_config(run, args)
    inputs = _load_eval_inputs(args)
    dets, _ = _detections(args, *inputs)
    _write_detections(run / "detections.tsv", inputs[-1], dets)
    print(f"{sum(map(len, dets))} detections -> {run / 'detections.tsv'}")
    return 0


def cmd_eval(args) -> int:
    run = _run_dir(args)
    _write_config(run, args)
    store, split, model, features, manifest = inputs = _load_eval_inputs(args)
    eval_cfg = EvalConfig(args.proposal_score_min, args.nms_iou, tuple(args.tp_iou), tuple(args.k_values))
    gt = manifest.ground_truth()
    if args.gzsd:
        dets, summary = _detections(args, *inputs)
        result = evaluate(dets, gt, eval_cfg)
        result.gzsd = summary
    else:
        dets, _ = _detections(args, *inputs)
        # plain ZSD scores against the candidate set only
        allowed = set(_classes(split, args.classes_set))
        result = evaluate(dets, [[g for g in gts if g[1] in allowed] for gts in gt], eval_cfg)
    (run / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    table = result.table(f"Recall@K (%) [{'GZSD' if args.gzsd else args.classes_set}], mAP in parentheses")
    (run / "metrics.txt").write_text(table, encoding="utf-8")
    _write_detections(run / "detections.tsv", manifest, dets)
    print(table, end="")
    return 0


COMMANDS = {"split": cmd_split, "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(parser, args)
        return COMMANDS[args.command](args)
    except (CLIError, OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"zsd {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
