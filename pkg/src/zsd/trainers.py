"""Training strategies: baseline, static background (SB), latent assignment
(LAB) and densely sampled embedding space (DSES)."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .embeddings import BACKGROUND, EmbeddingStore
from .model import OptimizerState, ProjectionModel, adam_step, batch_loss, predict_batch


class LeakageError(ValueError):
    """A training sample carries an unseen (test) class label."""


@dataclass(frozen=True)
class TrainingSample:
    feature: np.ndarray
    label: str


@dataclass
class SampleSet:
    """Column layout for training samples: features (N, D1) and labels."""
    features: np.ndarray
    labels: list[str]

    def __post_init__(self):
        self.labels = list(self.labels)
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != len(self.labels):
            raise ValueError(f"features {f.shape} do not match {len(self.labels)} labels")
        self.features = f

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample], d1: int | None = None) -> "SampleSet":
        if not samples:
            return cls.empty(d1 or 0)
        return cls(np.stack([s.feature for s in samples]), [s.label for s in samples])

    @classmethod
    def empty(cls, d1: int) -> "SampleSet":
        return cls(np.zeros((0, d1)), [])

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        for f, l in zip(self.features, self.labels):
            yield TrainingSample(f, l)

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(np.vstack([self.features, other.features.reshape(-1, self.features.shape[1])]),
                         self.labels + other.labels)

    def select(self, mask) -> "SampleSet":
        idx = np.flatnonzero(mask)
        return SampleSet(self.features[idx], [self.labels[i] for i in idx])


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class LabConfig:
    niters: int = 5
    sample_fraction: float | None = None  # None -> 1 / niters
    epochs_per_iter: int = 1
    lr_decay: float = 10.0
    decay_every: int = 2

    def __post_init__(self):
        if self.niters < 0 or self.epochs_per_iter <= 0 or self.decay_every <= 0 or self.lr_decay <= 0:
            raise ValueError("LAB config values must be positive")
        if self.sample_fraction is not None and not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")

    @property
    def fraction(self) -> float:
        if self.sample_fraction is not None:
            return self.sample_fraction
        return 1.0 / self.niters if self.niters else 1.0

    def lr_at(self, base_lr: float, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``: divided by ``lr_decay``
        after every ``decay_every`` iterations."""
        return base_lr / self.lr_decay ** ((iteration - 1) // self.decay_every)


@dataclass
class TrainReport:
    strategy: str
    epoch_loss: list[float] = field(default_factory=list)
    epoch_hinge: list[float] = field(default_factory=list)
    sample_counts: dict[str, int] = field(default_factory=dict)
    classes: int = 0
    lab_iterations: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_log(self) -> str:
        lines = [f"strategy={self.strategy}", f"classes={self.classes}"]
        lines += [f"samples.{k}={v}" for k, v in sorted(self.sample_counts.items())]
        for i, (l, h) in enumerate(zip(self.epoch_loss, self.epoch_hinge), start=1):
            lines.append(f"epoch={i} loss={l:.6g} hinge={h:.6g}")
        for it in self.lab_iterations:
            lines.append(f"lab.iteration={it['iteration']} lr={it['lr']:.3g} sampled={it['sampled']} "
                         f"shortfall={it['shortfall']} accumulated={it['accumulated']} "
                         f"distinct_labels={len(it['histogram'])}")
        return "\n".join(lines) + "\n"


def _check_labels(labels: Iterable[str], allowed: Sequence[str], unseen: Iterable[str]) -> None:
    unseen = set(unseen)
    leaked = sorted({l for l in labels if l in unseen})
    if leaked:
        raise LeakageError(f"unseen classes in training data: {leaked[:10]}")
    allowed_set = set(allowed)
    stray = sorted({l for l in labels if l not in allowed_set})
    if stray:
        raise ValueError(f"labels outside the training class set: {stray[:10]}")


def _fit(model: ProjectionModel, opt: OptimizerState, samples: SampleSet, classes: Sequence[str],
         class_vectors: np.ndarray, epochs: int, batch_size: int, rng: np.random.Generator,
         report: TrainReport, unseen_mask: np.ndarray) -> ProjectionModel:
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[l] for l in samples.labels], dtype=np.int64)
    X = samples.features
    W = model.W.copy()
    n = len(y)
    for _ in range(epochs):
        if n == 0:
            break
        order = rng.permutation(n)
        tot = hin = 0.0
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            if unseen_mask[y[b]].any():
                raise LeakageError("unseen-class sample reached the optimizer")
            l, h, g = batch_loss(W, X[b], y[b], class_vectors, model.margin, model.recon_weight)
            W, opt = adam_step(opt, W, g)
            tot += l * len(b)
            hin += h * len(b)
        report.epoch_loss.append(tot / n)
        report.epoch_hinge.append(hin / n)
    out = model.copy()
    out.W = W
    return out


def _unseen_mask(classes: Sequence[str], unseen: Iterable[str]) -> np.ndarray:
    u = set(unseen)
    return np.array([c in u for c in classes], dtype=bool)


def train_baseline(samples: SampleSet, model: ProjectionModel, store: EmbeddingStore,
                   seen_classes: Sequence[str], config: TrainConfig | None = None,
                   unseen: Iterable[str] = (), report: TrainReport | None = None,
                   opt: OptimizerState | None = None) -> tuple[ProjectionModel, TrainReport]:
    """Train on seen-class boxes only."""
    config = config or TrainConfig()
    classes = list(seen_classes)
    unseen = list(unseen)
    _check_labels(samples.labels, classes, unseen)
    if BACKGROUND in classes:
        raise ValueError("baseline training does not use the background class")
    report = report or TrainReport("baseline")
    report.classes = len(classes)
    report.sample_counts.setdefault("positive", len(samples))
    opt = opt or OptimizerState.for_model(model, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    model = _fit(model, opt, samples, classes, store.matrix(classes), config.epochs,
                 config.batch_size, rng, report, _unseen_mask(classes, unseen))
    return model, report


def background_vector(dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = 1.0
    return v


def with_background(store: EmbeddingStore) -> EmbeddingStore:
    """The store plus the fixed background vector (1, 0, ..., 0)."""
    if BACKGROUND in store:
        raise ValueError(f"store already contains the reserved token {BACKGROUND!r}")
    return store.extended({BACKGROUND: background_vector(store.dim)})


def train_sb(samples: SampleSet, model: ProjectionModel, store: EmbeddingStore,
             seen_classes: Sequence[str], config: TrainConfig | None = None,
             unseen: Iterable[str] = ()) -> tuple[ProjectionModel, TrainReport]:
    """Static background: background boxes are labelled ``BACKGROUND`` and
    pulled toward a fixed unit vector that is never updated."""
    config = config or TrainConfig()
    bg_store = with_background(store)
    n_bg = sum(l == BACKGROUND for l in samples.labels)
    # the background class only enters the loss when background boxes exist
    classes = list(seen_classes) + ([BACKGROUND] if n_bg else [])
    unseen = list(unseen)
    _check_labels(samples.labels, classes, unseen)
    report = TrainReport("sb", classes=len(classes),
                         sample_counts={"positive": len(samples) - n_bg, "background": n_bg})
    opt = OptimizerState.for_model(model, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    model = _fit(model, opt, samples, classes, bg_store.matrix(classes), config.epochs,
                 config.batch_size, rng, report, _unseen_mask(classes, unseen))
    return model, report


def train_lab(samples: SampleSet, background: np.ndarray, model: ProjectionModel,
              store: EmbeddingStore, seen_classes: Sequence[str], open_classes: Sequence[str],
              config: TrainConfig | None = None, lab_config: LabConfig | None = None,
              unseen: Iterable[str] = ()) -> tuple[ProjectionModel, TrainReport, np.ndarray]:
    """Latent-assignment training starting from a baseline-trained ``model``.

    Each iteration labels a random slice of the not-yet-labelled background
    features with their nearest open-vocabulary class, adds them to the
    training set and fine-tunes. Labels are assigned once and kept.

    Returns the model, the report and an array with the assigned open-class
    index for every background row (-1 if never sampled).
    """
    config = config or TrainConfig()
    lab_config = lab_config or LabConfig()
    open_classes = list(open_classes)
    if not open_classes:
        raise ValueError("LAB needs a non-empty open vocabulary")
    seen_classes = list(seen_classes)
    unseen = list(unseen)
    overlap = set(open_classes) & (set(seen_classes) | set(unseen))
    if overlap:
        raise ValueError(f"open vocabulary overlaps seen/unseen: {sorted(overlap)[:10]}")
    _check_labels(samples.labels, seen_classes, unseen)
    background = np.asarray(background, dtype=np.float64).reshape(-1, model.d1)
    open_vectors = store.matrix(open_classes)

    report = TrainReport("lab", sample_counts={"positive": len(samples), "background_pool": len(background)})
    report.classes = len(seen_classes)
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.for_model(model, lr=config.lr)
    pool = rng.permutation(len(background))
    per_iter = math.ceil(lab_config.fraction * len(background))
    assigned = np.full(len(background), -1, dtype=np.int64)
    taken = 0
    accumulated = SampleSet.empty(model.d1)

    for it in range(1, lab_config.niters + 1):
        batch_rows = pool[taken:taken + per_iter]
        taken += len(batch_rows)
        if len(batch_rows):
            idx, _ = predict_batch(model, background[batch_rows], open_vectors)
            assigned[batch_rows] = idx
            accumulated = accumulated.concat(
                SampleSet(background[batch_rows], [open_classes[i] for i in idx]))
        active_open = sorted(set(accumulated.labels))
        classes = seen_classes + active_open
        train_set = samples.concat(accumulated)
        _check_labels(train_set.labels, classes, unseen)
        opt.lr = lab_config.lr_at(config.lr, it)
        model = _fit(model, opt, train_set, classes, store.matrix(classes), lab_config.epochs_per_iter,
                     config.batch_size, rng, report, _unseen_mask(classes, unseen))
        hist = Counter(open_classes[i] for i in assigned[batch_rows])
        report.lab_iterations.append({
            "iteration": it,
            "lr": opt.lr,
            "sampled": int(len(batch_rows)),
            "shortfall": int(per_iter - len(batch_rows)),
            "accumulated": len(train_set),
            "active_open_classes": len(active_open),
            "histogram": dict(sorted(hist.items())),
        })
        report.classes = len(classes)
    return model, report, assigned


def augment_dses(train_classes: Iterable[str], train_samples: SampleSet, aux_classes: Iterable[str],
                 aux_samples: SampleSet, unseen: Iterable[str]) -> tuple[list[str], SampleSet]:
    """Merge an auxiliary labelled source into the training set, dropping
    every auxiliary class (and sample) that belongs to the unseen set."""
    unseen = set(unseen)
    base = list(dict.fromkeys(train_classes))
    # the primary set is never filtered silently
    if unseen & set(base):
        raise LeakageError(f"unseen classes in the training class set: {sorted(unseen & set(base))[:10]}")
    _check_labels(train_samples.labels, base, unseen)
    extra = sorted(set(aux_classes) - unseen - set(base))
    merged = base + extra
    if not len(aux_samples):
        return merged, train_samples
    keep = np.array([l not in unseen for l in aux_samples.labels], dtype=bool)
    return merged, train_samples.concat(aux_samples.select(keep))
