"""Train every strategy on one synthetic task and print Recall@K / mAP tables.

    python3 scripts/run_synthetic_experiment.py --sigma 0.05 --seed 0

The DSES auxiliary source is built from labelled open-vocabulary background
boxes, i.e. extra classes that are neither seen nor unseen.
"""
import argparse
import json
import time

import numpy as np

from zsd.data_io import build_training_set, generate_synthetic
from zsd.evaluation import EvalConfig, detect_all, evaluate, gzsd_evaluate
from zsd.model import ProjectionModel
from zsd.trainers import LabConfig, SampleSet, TrainConfig, augment_dses, train_baseline, train_lab, train_sb


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seen", type=int, default=40)
    ap.add_argument("--unseen", type=int, default=10)
    ap.add_argument("--open", type=int, default=50)
    ap.add_argument("--d1", type=int, default=32)
    ap.add_argument("--d2", type=int, default=16)
    ap.add_argument("--images", type=int, default=500)
    ap.add_argument("--sigma", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--nt", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also write all metrics to this file")
    args = ap.parse_args()

    task = generate_synthetic(args.seen, args.unseen, args.open, args.d1, args.d2, args.images, 3, args.sigma,
                              seed=args.seed)
    ts = build_training_set(task.train, task.features, task.seen, 3, seed=args.seed, unseen_classes=task.unseen)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    m0 = ProjectionModel.init(args.d1, args.d2, seed=args.seed)
    bg = ts.background

    models = {"untrained": m0}
    models["baseline"], _ = train_baseline(ts.positives, m0, task.store, task.seen, cfg, unseen=task.unseen)
    models["sb"], _ = train_sb(ts.sb_samples(), m0, task.store, task.seen, cfg, unseen=task.unseen)
    models["lab"], _, _ = train_lab(ts.positives, bg, models["baseline"], task.store, task.seen, task.open, cfg,
                                    LabConfig(), unseen=task.unseen)
    # half of the background rows, labelled with their generating open class
    half = ts.background_rows[: len(ts.background_rows) // 2]
    aux = SampleSet(task.features[half].astype(np.float64), [task.hidden_labels[r] for r in half])
    classes, merged = augment_dses(task.seen, ts.positives, task.open, aux, task.unseen)
    models["dses"], _ = train_baseline(merged, m0, task.store, classes, cfg, unseen=task.unseen)

    images = task.test.proposals_for(task.features)
    gts = task.test.ground_truth()
    gz_images = task.gzsd_test.proposals_for(task.features)
    gz_gts = task.gzsd_test.ground_truth()
    out = {}
    for name, model in models.items():
        t0 = time.perf_counter()
        result = evaluate(detect_all(model, images, task.unseen, task.store), gts, EvalConfig())
        result.gzsd, _ = gzsd_evaluate(model, gz_images, gz_gts, task.seen, task.unseen, task.store, args.nt)
        out[name] = result.to_dict()
        print(result.table(f"{name} (sigma={args.sigma}, {time.perf_counter() - t0:.1f}s)"))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
