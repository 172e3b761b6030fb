"""Linear visual-semantic projection with a cosine max-margin objective.

Region features ``phi`` (dimension D1) are mapped into the word-embedding
space by ``psi = W @ phi`` (W is D2 x D1) and compared with class vectors by
cosine similarity. Training minimises, per sample with true class ``y``::

    sum_{j != y} max(0, margin - S_y + S_j) + recon_weight * ||W.T @ psi - phi||^2

where the second term is a tied-decoder reconstruction regulariser.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingStore

CHECKPOINT_MAGIC = b"ZSDM"
CHECKPOINT_VERSION = 1


class DegenerateProjection(ValueError):
    """Raised when a feature projects to the zero vector."""


@dataclass
class ProjectionModel:
    W: np.ndarray
    margin: float = 1.0
    recon_weight: float = 1e-3

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("W must be a matrix")
        if self.margin <= 0 or self.recon_weight < 0:
            raise ValueError("margin must be > 0 and recon_weight >= 0")

    @classmethod
    def init(cls, d1: int, d2: int, seed: int = 0, **kwargs) -> "ProjectionModel":
        # Glorot-uniform
        a = np.sqrt(6.0 / (d1 + d2))
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-a, a, size=(d2, d1)), **kwargs)

    @property
    def d1(self) -> int:
        return self.W.shape[1]

    @property
    def d2(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "ProjectionModel":
        return ProjectionModel(self.W.copy(), self.margin, self.recon_weight)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @classmethod
    def for_model(cls, model: ProjectionModel, **kwargs) -> "OptimizerState":
        return cls(m=np.zeros_like(model.W), v=np.zeros_like(model.W), **kwargs)


def adam_step(state: OptimizerState, W: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update. Returns a new parameter array; the
    moment buffers in ``state`` are updated in place."""
    W = np.asarray(W, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != W.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {W.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient (training diverged)")
    if state.m is None:
        state.m = np.zeros_like(W)
        state.v = np.zeros_like(W)
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return W - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def _check_phi(model: ProjectionModel, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != model.d1:
        raise ValueError(f"feature dimension {phi.shape[-1]} != model D1 {model.d1}")
    return phi


def project(model: ProjectionModel, phi) -> np.ndarray:
    return model.W @ _check_phi(model, phi)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def similarity_matrix(model: ProjectionModel, X: np.ndarray, class_vectors: np.ndarray) -> np.ndarray:
    """Cosine similarities between projected rows of X (n, D1) and classes (c, D2)."""
    X = np.atleast_2d(_check_phi(model, X))
    psi = X @ model.W.T
    norms = np.linalg.norm(psi, axis=1)
    if np.any(norms == 0):
        raise DegenerateProjection("feature projects to the zero vector")
    return (psi / norms[:, None]) @ _unit_rows(class_vectors).T


def score(model: ProjectionModel, phi, classes: Sequence[str], store: EmbeddingStore) -> np.ndarray:
    return similarity_matrix(model, phi, store.matrix(list(classes)))[0]


def predict(model: ProjectionModel, phi, candidate_classes: Sequence[str],
            store: EmbeddingStore) -> tuple[str, float]:
    """Nearest class by cosine; ties go to the earlier candidate."""
    classes = list(candidate_classes)
    if not classes:
        raise ValueError("empty candidate class set")
    s = score(model, phi, classes, store)
    j = int(np.argmax(s))
    return classes[j], float(s[j])


def predict_batch(model: ProjectionModel, X: np.ndarray, class_vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise argmax class index and its similarity."""
    s = similarity_matrix(model, X, class_vectors)
    idx = np.argmax(s, axis=1)
    return idx, s[np.arange(len(idx)), idx]


def batch_loss(W: np.ndarray, X: np.ndarray, y: np.ndarray, class_vectors: np.ndarray,
               margin: float, recon_weight: float) -> tuple[float, float, np.ndarray]:
    """Mean objective over a batch.

    X: (B, D1) features, y: (B,) indices into ``class_vectors`` (C, D2).
    Returns (total loss, hinge part, gradient w.r.t. W). The hinge
    subgradient at the kink is taken as 0.
    """
    B = X.shape[0]
    C_hat = _unit_rows(class_vectors)
    psi = X @ W.T
    n = np.linalg.norm(psi, axis=1)
    if np.any(n == 0):
        raise DegenerateProjection("feature projects to the zero vector")
    psi_hat = psi / n[:, None]
    S = psi_hat @ C_hat.T
    rows = np.arange(B)
    s_true = S[rows, y]
    H = margin - s_true[:, None] + S
    active = H > 0
    active[rows, y] = False
    hinge = float(np.sum(H[active]))

    # dL/dS: +1 for each violating class, -(#violations) on the true class
    G = active.astype(np.float64)
    G[rows, y] = -active.sum(axis=1)
    # dS_j/dpsi = (w_j - S_j psi_hat) / |psi|
    d_psi = (G @ C_hat - np.sum(G * S, axis=1)[:, None] * psi_hat) / n[:, None]
    grad = d_psi.T @ X

    R = psi @ W - X
    recon = float(np.sum(R * R))
    if recon_weight:
        grad = grad + 2.0 * recon_weight * (psi.T @ R + W @ (R.T @ X))
    return (hinge + recon_weight * recon) / B, hinge / B, grad / B


def loss(model: ProjectionModel, phi, true_label: str, classes: Sequence[str],
         store: EmbeddingStore) -> tuple[float, np.ndarray]:
    """Single-sample objective and its gradient with respect to W."""
    classes = list(classes)
    if true_label not in classes:
        raise KeyError(f"true label {true_label!r} not among classes")
    phi = _check_phi(model, phi)
    total, _, grad = batch_loss(model.W, phi[None, :], np.array([classes.index(true_label)]),
                                store.matrix(classes), model.margin, model.recon_weight)
    return total, grad


def save_model(path: str | Path, model: ProjectionModel) -> None:
    d2, d1 = model.W.shape
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, d1, d2))
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())


def load_model(path: str | Path, margin: float = 1.0, recon_weight: float = 1e-3) -> ProjectionModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0")
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header at byte {len(data)}")
    version, d1, d2 = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at byte 4")
    expected = 16 + 8 * d1 * d2
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    W = np.frombuffer(data, dtype="<f8", offset=16).reshape(d2, d1).astype(np.float64)
    return ProjectionModel(W, margin=margin, recon_weight=recon_weight)
