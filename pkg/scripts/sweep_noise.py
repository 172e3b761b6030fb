"""Unseen Recall@100 (IoU 0.5) of the baseline as feature noise grows.

    python3 scripts/sweep_noise.py --sigmas 0,0.3,1,3,10 --seeds 3
"""
import argparse

import numpy as np

from zsd.data_io import build_training_set, generate_synthetic
from zsd.evaluation import detect_all, recall_at_k
from zsd.model import ProjectionModel
from zsd.trainers import TrainConfig, train_baseline


def run(sigma: float, seed: int, images: int) -> tuple[float, float]:
    task = generate_synthetic(40, 10, 50, 32, 16, images, 3, sigma, seed=seed,
                              test_background_per_image=50)
    ts = build_training_set(task.train, task.features, task.seen, 3, seed=seed, unseen_classes=task.unseen)
    m0 = ProjectionModel.init(32, 16, seed=seed)
    m, _ = train_baseline(ts.positives, m0, task.store, task.seen, TrainConfig(seed=seed), unseen=task.unseen)
    imgs, gts = task.test.proposals_for(task.features), task.test.ground_truth()
    return tuple(recall_at_k(detect_all(x, imgs, task.unseen, task.store), gts, 100, 0.5) for x in (m0, m))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", default="0,0.3,1,3,10")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--images", type=int, default=300)
    args = ap.parse_args()
    print(f"{'sigma':>6} {'untrained':>10} {'trained':>10}")
    for sigma in map(float, args.sigmas.split(",")):
        r = np.array([run(sigma, s, args.images) for s in range(args.seeds)])
        print(f"{sigma:6.2f} {r[:, 0].mean():10.3f} {r[:, 1].mean():10.3f}")


if __name__ == "__main__":
    main()
