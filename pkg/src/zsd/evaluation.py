"""Detection evaluation: proposal gating, class-wise NMS, Recall@K, mAP and
the generalized zero-shot (seen + unseen) protocol."""
from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingStore
from .geometry import Box, Detection, boxes_array, greedy_nms, iou_matrix
from .model import ProjectionModel, similarity_matrix

ALL = None  # K sentinel: keep every detection

GroundTruth = Sequence[tuple[Box, str]]


@dataclass
class EvalConfig:
    proposal_score_min: float = 0.07
    nms_iou: float = 0.4
    tp_iou_thresholds: tuple[float, ...] = (0.4, 0.5, 0.6)
    k_values: tuple[int | None, ...] = (ALL, 100, 80, 50)

    def __post_init__(self):
        for t in (self.nms_iou, *self.tp_iou_thresholds):
            if not 0 < t < 1:
                raise ValueError(f"IoU thresholds must lie in (0, 1), got {t}")
        for k in self.k_values:
            if k is not ALL and k <= 0:
                raise ValueError(f"K must be positive or ALL, got {k}")


def k_name(k: int | None) -> str:
    return "All" if k is ALL else str(k)


@dataclass
class Proposal:
    box: Box
    score: float
    feature: np.ndarray


def _class_nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    by_class: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        by_class[d.label].append(d)
    out = []
    for label in by_class:
        out.extend(greedy_nms(by_class[label], iou_threshold))
    return out


def _gate(proposals: Sequence[Proposal], config: EvalConfig) -> list[Proposal]:
    return [p for p in proposals if p.score > config.proposal_score_min]


def detect_image(model: ProjectionModel, proposals: Sequence[Proposal], candidate_classes: Sequence[str],
                 store: EmbeddingStore, config: EvalConfig | None = None) -> list[Detection]:
    """Score every gated proposal against every candidate class, then run
    greedy NMS separately per class. Detection score is the cosine."""
    config = config or EvalConfig()
    kept = _gate(proposals, config)
    if not kept:
        return []
    classes = list(candidate_classes)
    S = similarity_matrix(model, np.stack([p.feature for p in kept]), store.matrix(classes))
    dets = [Detection(p.box, c, float(S[i, j])) for j, c in enumerate(classes) for i, p in enumerate(kept)]
    return _class_nms(dets, config.nms_iou)


def gzsd_decide(model: ProjectionModel, phi, seen_classes: Sequence[str], unseen_classes: Sequence[str],
                store: EmbeddingStore, n_t: float) -> tuple[str, float, str]:
    """Best unseen class if its similarity reaches ``n_t``, else best seen class."""
    seen_classes, unseen_classes = list(seen_classes), list(unseen_classes)
    if not seen_classes or not unseen_classes:
        raise ValueError("GZSD needs non-empty seen and unseen class sets")
    (label, branch), sc = _gzsd_rows(model, np.atleast_2d(phi), seen_classes, unseen_classes, store, n_t)[0]
    return label, sc, branch


def _gzsd_rows(model, X, seen, unseen, store, n_t):
    Ss = similarity_matrix(model, X, store.matrix(seen))
    Su = similarity_matrix(model, X, store.matrix(unseen))
    js, ju = Ss.argmax(axis=1), Su.argmax(axis=1)
    out = []
    for i in range(len(X)):
        u = float(Su[i, ju[i]])
        if u >= n_t:
            out.append(((unseen[ju[i]], "unseen"), u))
        else:
            out.append(((seen[js[i]], "seen"), float(Ss[i, js[i]])))
    return out


def detect_image_gzsd(model: ProjectionModel, proposals: Sequence[Proposal], seen_classes: Sequence[str],
                      unseen_classes: Sequence[str], store: EmbeddingStore, n_t: float,
                      config: EvalConfig | None = None) -> list[Detection]:
    """One label per gated proposal via the novelty rule, then class-wise NMS."""
    config = config or EvalConfig()
    kept = _gate(proposals, config)
    if not kept:
        return []
    rows = _gzsd_rows(model, np.stack([p.feature for p in kept]), list(seen_classes),
                      list(unseen_classes), store, n_t)
    dets = [Detection(p.box, label, sc) for p, ((label, _), sc) in zip(kept, rows)]
    return _class_nms(dets, config.nms_iou)


def _sorted_desc(dets: Sequence[Detection]) -> list[Detection]:
    order = np.argsort(-np.array([d.score for d in dets], dtype=np.float64), kind="stable")
    return [dets[i] for i in order]


def top_k(dets: Sequence[Detection], k: int | None) -> list[Detection]:
    if k is not ALL and k <= 0:
        raise ValueError(f"K must be positive, got {k}")
    ranked = _sorted_desc(dets)
    return ranked if k is ALL else ranked[:k]


def match_image(dets: Sequence[Detection], ground_truth: GroundTruth, tp_iou: float) -> tuple[list[bool], list[int]]:
    """Greedy TP assignment in descending score order.

    ``dets`` must already be score-sorted. Each detection claims the unmatched
    same-class ground truth with the highest IoU (>= ``tp_iou``). Returns the
    TP flag per detection and the matched ground-truth index (-1 for FP).
    """
    if not dets:
        return [], []
    if not ground_truth:
        return [False] * len(dets), [-1] * len(dets)
    ov = iou_matrix(boxes_array([d.box for d in dets]), boxes_array([g for g, _ in ground_truth]))
    gt_labels = [l for _, l in ground_truth]
    taken = np.zeros(len(ground_truth), dtype=bool)
    tp, which = [], []
    for i, d in enumerate(dets):
        cand = np.array([(not taken[j]) and gt_labels[j] == d.label and ov[i, j] >= tp_iou
                         for j in range(len(ground_truth))])
        if cand.any():
            j = int(np.argmax(np.where(cand, ov[i], -1.0)))
            taken[j] = True
            tp.append(True)
            which.append(j)
        else:
            tp.append(False)
            which.append(-1)
    return tp, which


def _matched_per_class(detections, ground_truth, k, tp_iou):
    matched: dict[str, int] = defaultdict(int)
    total: dict[str, int] = defaultdict(int)
    for dets, gts in zip(detections, ground_truth, strict=True):
        for _, label in gts:
            total[label] += 1
        _, which = match_image(top_k(dets, k), gts, tp_iou)
        for j in which:
            if j >= 0:
                matched[gts[j][1]] += 1
    return matched, total


def recall_at_k(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[GroundTruth],
                k: int | None, tp_iou: float) -> float:
    """Micro-averaged recall over all ground-truth instances, keeping the
    top-``k`` detections of each image (all when ``k`` is ALL)."""
    if k is not ALL and k <= 0:
        raise ValueError(f"K must be positive, got {k}")
    matched, total = _matched_per_class(detections, ground_truth, k, tp_iou)
    n = sum(total.values())
    return sum(matched.values()) / n if n else 0.0


def per_class_recall(detections, ground_truth, k, tp_iou) -> dict[str, float]:
    matched, total = _matched_per_class(detections, ground_truth, k, tp_iou)
    return {c: matched[c] / total[c] for c in sorted(total)}


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated area under the PR curve for score-sorted TP flags."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    if not len(tp):
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: max precision at any equal-or-higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * envelope))


def mean_average_precision(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[GroundTruth],
                           tp_iou: float, k: int | None = ALL) -> float:
    """Mean AP over classes that have ground truth. Detections of a class are
    ranked globally across images; TP matching is the per-image greedy rule."""
    total: dict[str, int] = defaultdict(int)
    for gts in ground_truth:
        for _, label in gts:
            total[label] += 1
    if not total:
        raise ValueError("no ground truth in any class")
    # (score, image position, rank within image's class list) -> flag
    flags: dict[str, list[tuple[float, int, int, bool]]] = defaultdict(list)
    seq = 0
    for img, (dets, gts) in enumerate(zip(detections, ground_truth, strict=True)):
        kept = top_k(dets, k)
        by_class: dict[str, list[Detection]] = defaultdict(list)
        for d in kept:
            by_class[d.label].append(d)
        for label, cd in by_class.items():
            tp, _ = match_image(cd, gts, tp_iou)
            for d, f in zip(cd, tp):
                flags[label].append((d.score, img, seq, f))
                seq += 1
    aps = []
    for label in sorted(total):
        ranked = sorted(flags.get(label, []), key=lambda r: (-r[0], r[1], r[2]))
        aps.append(average_precision([r[3] for r in ranked], total[label]))
    return float(np.mean(aps))


def harmonic_mean(seen_recall: float, unseen_recall: float) -> float:
    if seen_recall < 0 or unseen_recall < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    if seen_recall + unseen_recall == 0:
        return 0.0
    return 2 * seen_recall * unseen_recall / (seen_recall + unseen_recall)


@dataclass
class EvalResult:
    recall: dict[str, dict[str, float]] = field(default_factory=dict)  # K -> IoU -> value
    map: dict[str, dict[str, float]] = field(default_factory=dict)
    per_class_recall: dict[str, dict[str, float]] = field(default_factory=dict)  # IoU -> class -> value
    macro_recall: dict[str, float] = field(default_factory=dict)
    gzsd: dict | None = None

    def to_dict(self) -> dict:
        out = {"recall": self.recall, "map": self.map, "per_class_recall": self.per_class_recall,
               "macro_recall": self.macro_recall}
        if self.gzsd is not None:
            out["gzsd"] = self.gzsd
        return out

    def table(self, title: str = "") -> str:
        """Text table, rows K and columns IoU, mAP in parentheses, values in %."""
        ious = sorted(next(iter(self.recall.values())).keys(), key=float) if self.recall else []
        head = "K↓ IoU→"
        width = 18
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{head:<10}" + "".join(f"{i:>{width}}" for i in ious))
        for kn, row in self.recall.items():
            cells = []
            for i in ious:
                cell = f"{100 * row[i]:.2f}"
                if kn in self.map and i in self.map[kn]:
                    cell += f" ({100 * self.map[kn][i]:.2f})"
                cells.append(f"{cell:>{width}}")
            lines.append(f"{kn:<10}" + "".join(cells))
        if self.gzsd is not None:
            g = self.gzsd
            lines.append(f"GZSD n_t={g['n_t']} IoU={g['tp_iou']} K={g['k']}: seen={100 * g['seen_recall']:.2f} "
                         f"unseen={100 * g['unseen_recall']:.2f} HM={100 * g['harmonic_mean']:.2f}")
        return "\n".join(lines) + "\n"


def _run_images(fn, images, workers: int):
    if workers <= 1:
        return [fn(x) for x in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, images))


def evaluate(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[GroundTruth],
             config: EvalConfig | None = None) -> EvalResult:
    config = config or EvalConfig()
    res = EvalResult()
    for k in config.k_values:
        kn = k_name(k)
        res.recall[kn] = {str(t): recall_at_k(detections, ground_truth, k, t) for t in config.tp_iou_thresholds}
        if any(gts for gts in ground_truth):
            res.map[kn] = {str(t): mean_average_precision(detections, ground_truth, t, k)
                           for t in config.tp_iou_thresholds}
    k_ref = 100 if 100 in config.k_values else config.k_values[0]
    for t in config.tp_iou_thresholds:
        pc = per_class_recall(detections, ground_truth, k_ref, t)
        res.per_class_recall[str(t)] = pc
        res.macro_recall[str(t)] = float(np.mean(list(pc.values()))) if pc else 0.0
    return res


def detect_all(model, images: Sequence[Sequence[Proposal]], classes, store, config=None, workers: int = 1):
    return _run_images(lambda props: detect_image(model, props, classes, store, config), images, workers)


def gzsd_evaluate(model: ProjectionModel, images: Sequence[Sequence[Proposal]], ground_truth: Sequence[GroundTruth],
                  seen_classes: Sequence[str], unseen_classes: Sequence[str], store: EmbeddingStore,
                  n_t: float, k: int | None = 100, tp_iou: float = 0.5, config: EvalConfig | None = None,
                  workers: int = 1) -> tuple[dict, list[list[Detection]]]:
    """Seen and unseen Recall@K under the novelty rule, plus their harmonic mean."""
    dets = _run_images(lambda props: detect_image_gzsd(model, props, seen_classes, unseen_classes,
                                                       store, n_t, config), images, workers)
    seen_set, unseen_set = set(seen_classes), set(unseen_classes)
    gt_seen = [[g for g in gts if g[1] in seen_set] for gts in ground_truth]
    gt_unseen = [[g for g in gts if g[1] in unseen_set] for gts in ground_truth]
    # recall per split uses the full top-K list of the image
    r_seen = recall_at_k(dets, gt_seen, k, tp_iou) if any(gt_seen) else 0.0
    r_unseen = recall_at_k(dets, gt_unseen, k, tp_iou) if any(gt_unseen) else 0.0
    summary = {"n_t": n_t, "k": k_name(k), "tp_iou": tp_iou, "seen_recall": r_seen,
               "unseen_recall": r_unseen, "harmonic_mean": harmonic_mean(r_seen, r_unseen)}
    return summary, dets
