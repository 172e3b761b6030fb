"""Word embedding storage and the seen / unseen / open class-set algebra."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Reserved token for the static background class; rejected in embedding files.
BACKGROUND = "<background>"

DEFAULT_DIM = 300


class EmbeddingFormatError(ValueError):
    pass


class EmbeddingStore:
    """Immutable token -> unit vector table.

    Rows are L2-normalized on construction unless ``normalize=False``.
    """

    def __init__(self, tokens: Sequence[str], vectors: np.ndarray, normalize: bool = True,
                 duplicates: int = 0):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
            raise ValueError("vectors must be a (n_tokens, dim) matrix")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding vectors must be finite")
        if normalize:
            norms = np.linalg.norm(vectors, axis=1)
            if np.any(norms == 0):
                bad = [t for t, n in zip(tokens, norms) if n == 0]
                raise ValueError(f"zero embedding vector for {bad[:5]}")
            vectors = vectors / norms[:, None]
        vectors.setflags(write=False)
        self._tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("duplicate tokens in store")
        self._vectors = vectors
        self.duplicates = duplicates

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[float]], normalize: bool = True) -> "EmbeddingStore":
        tokens = list(mapping)
        return cls(tokens, np.array([mapping[t] for t in tokens], dtype=np.float64), normalize=normalize)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def vector(self, token: str) -> np.ndarray:
        try:
            return self._vectors[self._index[token]]
        except KeyError:
            raise KeyError(f"no embedding for {token!r}") from None

    def matrix(self, tokens: Sequence[str]) -> np.ndarray:
        """Stack the vectors of ``tokens`` in order, shape (len(tokens), dim)."""
        missing = [t for t in tokens if t not in self._index]
        if missing:
            raise KeyError(f"no embedding for {missing[:10]}")
        return self._vectors[[self._index[t] for t in tokens]]

    def extended(self, extra: Mapping[str, Sequence[float]]) -> "EmbeddingStore":
        """New store with ``extra`` appended verbatim (no renormalization)."""
        clash = [t for t in extra if t in self._index]
        if clash:
            raise ValueError(f"tokens already present in store: {clash}")
        tokens = list(self._tokens) + list(extra)
        vecs = np.vstack([self._vectors] + [np.asarray(v, dtype=np.float64)[None, :] for v in extra.values()])
        return EmbeddingStore(tokens, vecs, normalize=False, duplicates=self.duplicates)


def load_embeddings(path: str | Path, expected_dim: int = DEFAULT_DIM) -> EmbeddingStore:
    """Read a ``token v1 ... vD`` text file into a normalized store.

    Duplicate tokens keep the first occurrence; the number of dropped lines
    is available as ``store.duplicates``.
    """
    if expected_dim <= 0:
        raise ValueError("expected_dim must be positive")
    tokens: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != expected_dim + 1:
                raise EmbeddingFormatError(
                    f"{path}: line {lineno}: expected {expected_dim} values, got {len(parts) - 1}")
            token = parts[0]
            if token == BACKGROUND:
                raise EmbeddingFormatError(f"{path}: line {lineno}: reserved token {BACKGROUND!r}")
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError:
                raise EmbeddingFormatError(f"{path}: line {lineno}: non-numeric value") from None
            if not all(np.isfinite(values)) or not any(values):
                raise EmbeddingFormatError(f"{path}: line {lineno}: vector must be finite and nonzero")
            if token in seen:
                duplicates += 1
                continue
            seen.add(token)
            tokens.append(token)
            rows.append(values)
    if not tokens:
        raise EmbeddingFormatError(f"{path}: empty embedding file")
    if duplicates:
        log.warning("%s: %d duplicate tokens ignored (first occurrence kept)", path, duplicates)
    return EmbeddingStore(tokens, np.array(rows), duplicates=duplicates)


def write_embeddings(path: str | Path, store: EmbeddingStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in zip(store.tokens, store.vectors):
            fh.write(token + " " + " ".join(np.format_float_positional(v, unique=True, trim="-")
                                            for v in vec) + "\n")


def sniff_dim(path: str | Path) -> int:
    """Dimension of the first record in an embedding file."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return len(line.rstrip("\n").split(" ")) - 1
    raise EmbeddingFormatError(f"{path}: empty embedding file")


def load_token_list(path: str | Path) -> list[str]:
    """One token per line; blank lines ignored, order preserved."""
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class ClassVocabulary:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    open: tuple[str, ...]

    @property
    def all(self) -> tuple[str, ...]:
        return tuple(sorted(self.seen + self.unseen + self.open))


def build_open_vocabulary(all_tokens: Iterable[str], seen: Iterable[str], unseen: Iterable[str],
                          eligible: Iterable[str]) -> ClassVocabulary:
    """Partition the eligible, embedded tokens into S, U and O = rest.

    ``eligible`` stands in for a lexical-database filter (e.g. "has a
    WordNet synset"); callers supply it as a plain token list.
    """
    all_set, seen_set, unseen_set = set(all_tokens), set(seen), set(unseen)
    eligible_set = set(eligible)
    overlap = seen_set & unseen_set
    if overlap:
        raise ValueError(f"seen and unseen overlap: {sorted(overlap)[:10]}")
    labelled = seen_set | unseen_set
    missing = sorted(labelled - all_set)
    if missing:
        raise KeyError(f"classes without embeddings: {missing[:20]}")
    ineligible = sorted(labelled - eligible_set)
    if ineligible:
        raise ValueError(f"classes not in eligible list: {ineligible[:20]}")
    open_set = (eligible_set & all_set) - labelled
    return ClassVocabulary(tuple(sorted(seen_set)), tuple(sorted(unseen_set)), tuple(sorted(open_set)))
