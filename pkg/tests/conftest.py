import numpy as np
import pytest

from zsd.embeddings import EmbeddingStore

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_store(rng, n, dim, prefix="c"):
    vecs = rng.standard_normal((n, dim))
    return EmbeddingStore([f"{prefix}{i:03d}" for i in range(n)], vecs)


def clustered_class_store(sizes=(6, 6, 6, 6, 6, 5, 5, 5, 10, 10), dim=50, spread=0.05, seed=0):
    """Classes grouped in tight clusters around orthogonal centres.

    The default sizes sum to 65 and give sum(ceil(0.2 * n)) = 17 unseen.
    """
    rng = np.random.default_rng(seed)
    centres, _ = np.linalg.qr(rng.standard_normal((dim, len(sizes))))
    tokens, rows = [], []
    for c, n in enumerate(sizes):
        for i in range(n):
            tokens.append(f"k{c}w{i}")
            rows.append(centres[:, c] + spread * rng.standard_normal(dim))
    return EmbeddingStore(tokens, np.array(rows))
