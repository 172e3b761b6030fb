"""Feature/manifest files, seen-unseen split creation, training-set
construction from proposals, and a synthetic task generator."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import BACKGROUND, EmbeddingStore
from .evaluation import Proposal
from .geometry import Box, assign_training_label, iou
from .trainers import LeakageError, SampleSet

FEATURE_MAGIC = b"ZSDF"
FEATURE_VERSION = 1
_HEADER = 16


class FeatureFormatError(ValueError):
    pass


# --- feature matrices -------------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d1 = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, n, d1))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < _HEADER:
        raise FeatureFormatError(f"{path}: header truncated at byte offset {len(data)}")
    version, n, d1 = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte offset 4")
    expected = _HEADER + 4 * n * d1
    if len(data) < expected:
        raise FeatureFormatError(f"{path}: payload truncated at byte offset {len(data)}, "
                                 f"expected {expected} bytes for {n}x{d1}")
    if len(data) > expected:
        raise FeatureFormatError(f"{path}: trailing data at byte offset {expected}")
    X = np.frombuffer(data, dtype="<f4", offset=_HEADER, count=n * d1).reshape(n, d1).astype(np.float32)
    if not np.all(np.isfinite(X)):
        row = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise FeatureFormatError(f"{path}: non-finite value in row {row} "
                                 f"(byte offset {_HEADER + 4 * row * d1})")
    return X


# --- manifests --------------------------------------------------------------

@dataclass
class ProposalRecord:
    box: Box
    proposal_score: float
    feature_row: int


@dataclass
class ImageRecord:
    image_id: str
    ground_truth: list[tuple[Box, str]] = field(default_factory=list)
    proposals: list[ProposalRecord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    classes: list[str]
    images: list[ImageRecord]

    def validate(self, n_features: int | None = None) -> None:
        declared = set(self.classes)
        for im in self.images:
            for _, label in im.ground_truth:
                if label not in declared:
                    raise ValueError(f"image {im.image_id}: undeclared label {label!r}")
            if n_features is not None:
                for p in im.proposals:
                    if not 0 <= p.feature_row < n_features:
                        raise ValueError(f"image {im.image_id}: feature_row {p.feature_row} out of range")

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "images": [{
                "image_id": im.image_id,
                "ground_truth": [{"box": b.as_list(), "label": l} for b, l in im.ground_truth],
                "proposals": [{"box": p.box.as_list(), "proposal_score": p.proposal_score,
                               "feature_row": p.feature_row} for p in im.proposals],
            } for im in self.images],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        images = [ImageRecord(
            str(im["image_id"]),
            [(Box.from_seq(g["box"]), g["label"]) for g in im.get("ground_truth", [])],
            [ProposalRecord(Box.from_seq(p["box"]), float(p["proposal_score"]), int(p["feature_row"]))
             for p in im.get("proposals", [])],
        ) for im in d["images"]]
        return cls(list(d["classes"]), images)

    def without_images_containing(self, classes: Iterable[str]) -> "DatasetManifest":
        """Drop every image with a ground-truth box from ``classes``."""
        drop = set(classes)
        return DatasetManifest(self.classes, [im for im in self.images
                                              if not any(l in drop for _, l in im.ground_truth)])

    def proposals_for(self, features: np.ndarray) -> list[list[Proposal]]:
        return [[Proposal(p.box, p.proposal_score, features[p.feature_row]) for p in im.proposals]
                for im in self.images]

    def ground_truth(self) -> list[list[tuple[Box, str]]]:
        return [list(im.ground_truth) for im in self.images]


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, n_features: int | None = None) -> DatasetManifest:
    m = DatasetManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    m.validate(n_features)
    return m


# --- splits -----------------------------------------------------------------

@dataclass
class SplitSpec:
    seen: list[str]
    unseen: list[str]
    cluster_assignments: dict[str, int]
    seed: int
    K_clusters: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "K_clusters": self.K_clusters,
                           "seen": self.seen, "unseen": self.unseen}, indent=2) + "\n"

    def clusters(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for t, c in sorted(self.cluster_assignments.items()):
            out.setdefault(c, []).append(t)
        return dict(sorted(out.items()))


def load_split(path: str | Path) -> SplitSpec:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitSpec(list(d["seen"]), list(d["unseen"]), {}, int(d["seed"]), int(d["K_clusters"]))


class ClusteringError(RuntimeError):
    pass


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(X)))]
    dist = 1.0 - X @ X[centers[0]]
    for _ in range(1, k):
        d = np.clip(dist, 0.0, None)
        total = d.sum()
        nxt = int(rng.choice(len(X), p=d / total)) if total > 0 else int(rng.integers(len(X)))
        centers.append(nxt)
        dist = np.minimum(dist, 1.0 - X @ X[nxt])
    return X[centers].copy()


def spherical_kmeans(X: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 20,
                     max_iter: int = 100, max_retries: int = 10) -> tuple[np.ndarray, float]:
    """Cosine k-means on unit rows. Returns (labels, inertia = sum of 1 - cos).

    A run that empties a cluster is re-seeded, up to ``max_retries`` per restart.
    """
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    best: tuple[np.ndarray, float] | None = None
    for _ in range(restarts):
        for _attempt in range(max_retries):
            C = _kmeanspp(X, k, rng)
            labels = None
            ok = True
            for _it in range(max_iter):
                new = np.argmax(X @ C.T, axis=1)
                if np.bincount(new, minlength=k).min() == 0:
                    ok = False
                    break
                if labels is not None and np.array_equal(new, labels):
                    break
                labels = new
                C = np.stack([X[labels == c].sum(axis=0) for c in range(k)])
                C /= np.linalg.norm(C, axis=1, keepdims=True)
            if ok:
                labels = np.argmax(X @ C.T, axis=1)
                inertia = float(np.sum(1.0 - np.sum(X * C[labels], axis=1)))
                if best is None or inertia < best[1] - 1e-12:
                    best = (labels, inertia)
                break
    if best is None:
        raise ClusteringError(f"could not find {k} non-empty clusters after {max_retries} retries")
    return best


def make_split(class_tokens: Sequence[str], store: EmbeddingStore, K_clusters: int,
               unseen_fraction: float = 0.2, seed: int = 0, restarts: int = 20) -> SplitSpec:
    """Cluster class word vectors by cosine and move ceil(fraction * size)
    random members of each cluster to the unseen set."""
    tokens = sorted(set(class_tokens))
    if not 0 < K_clusters <= len(tokens):
        raise ValueError(f"K_clusters must be in [1, {len(tokens)}]")
    if not 0 <= unseen_fraction <= 1:
        raise ValueError("unseen_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    labels, _ = spherical_kmeans(store.matrix(tokens), K_clusters, rng, restarts=restarts)
    # renumber clusters by their first token so ids do not depend on seeding order
    first: dict[int, int] = {}
    for i, c in enumerate(labels):
        first.setdefault(int(c), i)
    renum = {c: r for r, (c, _) in enumerate(sorted(first.items(), key=lambda kv: kv[1]))}
    assignments = {t: renum[int(c)] for t, c in zip(tokens, labels)}
    unseen: list[str] = []
    for c in range(K_clusters):
        members = [t for t in tokens if assignments[t] == c]
        n_unseen = math.ceil(unseen_fraction * len(members) - 1e-9)
        picked = rng.choice(len(members), size=n_unseen, replace=False) if n_unseen else []
        unseen.extend(members[i] for i in picked)
    unseen = sorted(unseen)
    seen = sorted(set(tokens) - set(unseen))
    return SplitSpec(seen, unseen, assignments, seed, K_clusters)


# --- training-set construction ----------------------------------------------

@dataclass
class TrainingSet:
    positives: SampleSet
    background: np.ndarray
    background_rows: list[int]
    counts: dict[str, int]

    def sb_samples(self) -> SampleSet:
        return self.positives.concat(SampleSet(self.background, [BACKGROUND] * len(self.background)))


def build_training_set(manifest: DatasetManifest, features: np.ndarray, seen_classes: Iterable[str],
                       negatives_per_image: int = 3, seed: int = 0,
                       unseen_classes: Iterable[str] = ()) -> TrainingSet:
    """Label proposals by IoU with ground truth.

    Positives whose class is not seen are excluded and counted (unseen
    objects may still appear in training images). Up to
    ``negatives_per_image`` zero-overlap proposals per image are sampled
    into the background pool.
    """
    seen = set(seen_classes)
    unseen = set(unseen_classes)
    rng = np.random.default_rng(seed)
    X, y, bg_rows = [], [], []
    counts = {"positive": 0, "background_low_iou": 0, "background_zero_iou": 0, "discard": 0,
              "excluded_unseen": 0, "excluded_other": 0}
    for im in manifest.images:
        zero = []
        for p in im.proposals:
            a = assign_training_label(p.box, im.ground_truth)
            if a.kind == "positive":
                if a.label in seen:
                    X.append(features[p.feature_row])
                    y.append(a.label)
                    counts["positive"] += 1
                elif a.label in unseen:
                    counts["excluded_unseen"] += 1
                else:
                    counts["excluded_other"] += 1
            elif a.kind == "background":
                bg_rows.append(p.feature_row)
                counts["background_low_iou"] += 1
            elif all(iou(p.box, g) == 0 for g, _ in im.ground_truth):
                zero.append(p.feature_row)
            else:
                counts["discard"] += 1
        if zero:
            take = min(negatives_per_image, len(zero))
            picked = sorted(rng.choice(len(zero), size=take, replace=False)) if take else []
            bg_rows.extend(zero[i] for i in picked)
            counts["background_zero_iou"] += take
            counts["discard"] += len(zero) - take
    d1 = features.shape[1]
    pos = SampleSet(np.array(X, dtype=np.float64).reshape(-1, d1), y)
    leaked = set(pos.labels) & unseen
    if leaked:  # pragma: no cover - guarded above
        raise LeakageError(sorted(leaked))
    bg = np.asarray(features[bg_rows], dtype=np.float64).reshape(-1, d1)
    return TrainingSet(pos, bg, bg_rows, counts)


# --- synthetic tasks --------------------------------------------------------

CELL = 128
MIN_SIDE, MAX_SIDE = 32, 64


@dataclass
class SyntheticTask:
    A: np.ndarray
    store: EmbeddingStore
    seen: list[str]
    unseen: list[str]
    open: list[str]
    features: np.ndarray
    train: DatasetManifest
    test: DatasetManifest
    gzsd_test: DatasetManifest
    sigma: float
    # feature row -> generating class for every row (foreground and background)
    hidden_labels: dict[int, str]
    background_rows: set[int]


def _random_unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _orthonormal(rng, n, d):
    if n > d:
        raise ValueError(f"cannot draw {n} orthonormal vectors in {d} dimensions")
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T


def generate_synthetic(S_size: int, U_size: int, O_size: int, D1: int, D2: int, images: int,
                       regions_per_image: int, sigma: float, seed: int = 0, *,
                       test_images: int | None = None, jitter_per_region: int = 2,
                       background_per_image: int = 6, test_background_per_image: int = 200,
                       grid: int = 16, orthogonal: bool = False) -> SyntheticTask:
    """Build a desk-scale detection task with a known feature/embedding map.

    Features are ``A @ w_label + noise`` with ``A`` (D1 x D2) of condition
    number <= 2 and noise of expected norm ``sigma``. Every image lays its
    boxes out one per grid cell so distinct objects never overlap. Each
    ground-truth object comes with jittered duplicates (IoU >= 0.6, same
    class) and one near-miss box (0 < IoU < 0.2) carrying a background
    feature; pure background boxes fill further cells. Background features
    are generated from the open-vocabulary directions.

    Training images hold seen objects only, ``test`` holds unseen objects
    only and ``gzsd_test`` mixes both.
    """
    if min(S_size, U_size, D1, D2, regions_per_image) <= 0 or O_size <= 0 or images < 0:
        raise ValueError("sizes and dimensions must be positive")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if D1 < D2:
        raise ValueError("D1 must be >= D2 so the feature map is injective")
    cells = grid * grid
    if regions_per_image + max(background_per_image, test_background_per_image) > cells:
        raise ValueError(f"layout infeasible: {cells} cells for "
                         f"{regions_per_image + max(background_per_image, test_background_per_image)} objects")
    test_images = max(1, images // 5) if test_images is None else test_images
    rng = np.random.default_rng(seed)

    n_cls = S_size + U_size + O_size
    vecs = _orthonormal(rng, n_cls, D2) if orthogonal else _random_unit(rng, n_cls, D2)
    seen = [f"s{i:03d}" for i in range(S_size)]
    unseen = [f"u{i:03d}" for i in range(U_size)]
    open_ = [f"o{i:03d}" for i in range(O_size)]
    store = EmbeddingStore(seen + unseen + open_, vecs)

    u, _, vt = np.linalg.svd(rng.standard_normal((D1, D2)), full_matrices=False)
    A = u @ np.diag(rng.uniform(1.0, 2.0, size=D2)) @ vt

    rows: list[np.ndarray] = []
    hidden: dict[int, str] = {}
    bg_rows: set[int] = set()

    def feature(label: str, background: bool = False) -> int:
        phi = A @ store.vector(label)
        if sigma:
            phi = phi + sigma * rng.standard_normal(D1) / np.sqrt(D1)
        rows.append(phi)
        i = len(rows) - 1
        hidden[i] = label
        if background:
            bg_rows.add(i)
        return i

    def box_in_cell(cell: int, side_w: float, side_h: float, room_w: float) -> Box:
        cx, cy = (cell % grid) * CELL, (cell // grid) * CELL
        x1 = cx + 2 + rng.uniform(0, room_w)
        y1 = cy + 2 + rng.uniform(0, CELL - 4 - side_h)
        return Box(x1, y1, x1 + side_w, y1 + side_h)

    def make_image(image_id: str, classes: Sequence[str], n_bg: int) -> ImageRecord:
        layout = rng.permutation(cells)
        rec = ImageRecord(image_id)
        for r in range(regions_per_image):
            label = classes[int(rng.integers(len(classes)))]
            w, h = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
            # leave room for the near-miss box to the right inside the cell
            gt = box_in_cell(int(layout[r]), w, h, CELL - 4 - 1.75 * w)
            rec.ground_truth.append((gt, label))
            rec.proposals.append(ProposalRecord(gt, 1.0, feature(label)))
            for _ in range(jitter_per_region):
                dx, dy = rng.uniform(-0.05, 0.05, size=2) * (w, h)
                jb = Box(max(gt.x1 + dx, 0.0), max(gt.y1 + dy, 0.0), gt.x2 + dx, gt.y2 + dy)
                rec.proposals.append(ProposalRecord(jb, float(rng.uniform(0.5, 1.0)), feature(label)))
            near = Box(gt.x1 + 0.75 * w, gt.y1, gt.x2 + 0.75 * w, gt.y2)
            rec.proposals.append(ProposalRecord(near, float(rng.uniform(0.1, 1.0)),
                                                feature(open_[int(rng.integers(O_size))], True)))
        for c in layout[regions_per_image:regions_per_image + n_bg]:
            w, h = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
            b = box_in_cell(int(c), w, h, CELL - 4 - w)
            rec.proposals.append(ProposalRecord(b, float(rng.uniform(0.0, 1.0)),
                                                feature(open_[int(rng.integers(O_size))], True)))
        return rec

    train = DatasetManifest(seen, [make_image(f"train{i:05d}", seen, background_per_image)
                                   for i in range(images)])
    test = DatasetManifest(unseen, [make_image(f"test{i:05d}", unseen, test_background_per_image)
                                    for i in range(test_images)])
    gzsd = DatasetManifest(seen + unseen, [make_image(f"gzsd{i:05d}", seen + unseen, test_background_per_image)
                                           for i in range(test_images)])
    features = np.array(rows, dtype=np.float32).reshape(-1, D1)
    return SyntheticTask(A, store, seen, unseen, open_, features, train, test, gzsd, sigma, hidden, bg_rows)
