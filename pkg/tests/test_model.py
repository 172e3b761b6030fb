import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zsd.embeddings import EmbeddingStore, cosine_similarity
from zsd.model import (DegenerateProjection, OptimizerState, ProjectionModel, adam_step, batch_loss, load_model,
                       loss, predict, project, save_model, score)


def ref_objective(W, phi, y, C, margin, lam):
    """Loop-based objective; independent of the vectorised path."""
    psi = W @ phi
    s = [cosine_similarity(psi, c) for c in C]
    hinge = sum(max(0.0, margin - s[y] + s[j]) for j in range(len(C)) if j != y)
    r = W.T @ psi - phi
    return hinge + lam * float(r @ r), [margin - s[y] + s[j] for j in range(len(C)) if j != y]


def fd_grad(f, W, h=1e-5):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return g


def random_instance(rng, d1=32, d2=16, n_cls=6, lam=1e-3, min_gap=1e-3):
    """Draw (model, phi, label, store) away from hinge kinks."""
    while True:
        store = EmbeddingStore([f"c{i}" for i in range(n_cls)], rng.standard_normal((n_cls, d2)))
        model = ProjectionModel(rng.standard_normal((d2, d1)) / np.sqrt(d1), margin=1.0, recon_weight=lam)
        phi = rng.standard_normal(d1)
        y = int(rng.integers(n_cls))
        _, args = ref_objective(model.W, phi, y, store.vectors, model.margin, lam)
        if min(abs(a) for a in args) > min_gap:
            return model, phi, f"c{y}", y, store


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_project_examples():
    m = ProjectionModel(np.eye(3))
    np.testing.assert_array_equal(project(m, [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(project(ProjectionModel(np.zeros((2, 3))), [1, 2, 3]), [0, 0])
    np.testing.assert_array_equal(project(ProjectionModel([[1, 1], [0, 1]]), [2, 3]), [5, 3])
    with pytest.raises(ValueError):
        project(m, [1, 2])


def test_init_bounds_and_determinism():
    a = ProjectionModel.init(32, 16, seed=3)
    b = ProjectionModel.init(32, 16, seed=3)
    np.testing.assert_array_equal(a.W, b.W)
    assert a.W.shape == (16, 32)
    assert np.abs(a.W).max() <= np.sqrt(6 / 48)


def test_score_examples(rng):
    store = EmbeddingStore(["cat", "dog", "cow"], rng.standard_normal((3, 4)))
    m = ProjectionModel(np.eye(4))
    assert score(m, store.vector("cat") * 3, ["cat"], store)[0] == pytest.approx(1.0)
    orth = EmbeddingStore(["a", "b"], [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(score(ProjectionModel(np.eye(3)), [0, 0, 2], ["a", "b"], orth), [0, 0])
    phi = rng.standard_normal(4)
    W = rng.standard_normal((4, 4))
    got = score(ProjectionModel(W), phi, ["cow", "cat", "dog"], store)
    want = [cosine_similarity(W @ phi, store.vector(c)) for c in ["cow", "cat", "dog"]]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_score_degenerate():
    store = EmbeddingStore(["a"], [[1.0, 0.0]])
    with pytest.raises(DegenerateProjection):
        score(ProjectionModel(np.zeros((2, 2))), [1, 1], ["a"], store)


def test_loss_examples():
    store = EmbeddingStore(["a", "b", "c"], np.eye(3))
    m = ProjectionModel(np.eye(3), margin=1.0, recon_weight=0.0)
    # S_true = 1, others 0: every hinge sits at max(0, 0)
    val, g = loss(m, [1, 0, 0], "a", ["a", "b", "c"], store)
    assert val == 0.0
    np.testing.assert_array_equal(g, 0)


def test_loss_hand_value():
    # S_true = 0.2, S_other = 0.5 -> max(0, 1 - 0.2 + 0.5) = 1.3
    t = np.array([0.2, np.sqrt(1 - 0.04)])
    o = np.array([0.5, np.sqrt(1 - 0.25)])
    # psi = e1 gives cos(psi, t) = 0.2, cos(psi, o) = 0.5
    store = EmbeddingStore(["t", "o"], np.stack([t, o]))
    m = ProjectionModel(np.eye(2), margin=1.0, recon_weight=0.0)
    val, _ = loss(m, [1, 0], "t", ["t", "o"], store)
    assert val == pytest.approx(1.3)


def test_loss_missing_label():
    store = EmbeddingStore(["a", "b"], np.eye(2))
    with pytest.raises(KeyError):
        loss(ProjectionModel(np.eye(2)), [1, 0], "z", ["a", "b"], store)


def test_reconstruction_term():
    store = EmbeddingStore(["a", "b"], np.eye(2))
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    m = ProjectionModel(W, recon_weight=0.5)
    phi = np.array([1.0, 1.0])
    val, _ = loss(m, phi, "a", ["a", "b"], store)
    hinge, _ = ref_objective(W, phi, 0, store.vectors, 1.0, 0.0)
    # W.T W phi = (4, 1) -> residual (3, 0)
    assert val == pytest.approx(hinge + 0.5 * 9)


@pytest.mark.parametrize("lam", [0.0, 1e-3, 0.3])
def test_gradient_matches_finite_differences(rng, lam):
    for _ in range(10):
        model, phi, label, y, store = random_instance(rng, lam=lam)
        val, g = loss(model, phi, label, store.tokens, store)
        f = lambda W: ref_objective(W, phi, y, store.vectors, 1.0, lam)[0]
        assert val == pytest.approx(f(model.W), rel=1e-12, abs=1e-12)
        assert rel_err(g, fd_grad(f, model.W)) < 1e-4


def test_batch_is_mean_of_samples(rng):
    store = EmbeddingStore([f"c{i}" for i in range(5)], rng.standard_normal((5, 6)))
    W = rng.standard_normal((6, 8))
    X = rng.standard_normal((7, 8))
    y = rng.integers(5, size=7)
    total, _, grad = batch_loss(W, X, y, store.vectors, 1.0, 0.01)
    m = ProjectionModel(W, recon_weight=0.01)
    singles = [loss(m, X[i], f"c{y[i]}", store.tokens, store) for i in range(7)]
    assert total == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grad, np.mean([s[1] for s in singles], axis=0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_slack(seed):
    r = np.random.default_rng(seed)
    store = EmbeddingStore([f"c{i}" for i in range(4)], r.standard_normal((4, 5)))
    m = ProjectionModel(r.standard_normal((5, 6)), recon_weight=0.01)
    phi = r.standard_normal(6)
    val, _ = loss(m, phi, "c0", store.tokens, store)
    assert val >= 0
    # with a tiny margin the hinge may vanish; then loss is exactly the reconstruction part
    m2 = ProjectionModel(m.W, margin=1e-9, recon_weight=0.01)
    hinge, args = ref_objective(m.W, phi, 0, store.vectors, 1e-9, 0.0)
    if max(args) < 0:
        r_ = m.W.T @ m.W @ phi - phi
        assert loss(m2, phi, "c0", store.tokens, store)[0] == pytest.approx(0.01 * r_ @ r_)


def test_adam_zero_gradient():
    st_ = OptimizerState(lr=1e-3)
    W = np.ones((2, 2))
    W2, st_ = adam_step(st_, W, np.zeros((2, 2)))
    np.testing.assert_array_equal(W2, W)
    assert st_.step == 1


def test_adam_first_step_magnitude():
    # m_hat = v_hat = 1 -> delta = lr / (1 + eps)
    W2, _ = adam_step(OptimizerState(lr=1e-3), np.array([[0.0]]), np.array([[1.0]]))
    assert W2[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_moves_against_gradient_sign(rng):
    g = rng.standard_normal((3, 4))
    st_ = OptimizerState(lr=1e-2)
    W = np.zeros((3, 4))
    for _ in range(100):
        W, st_ = adam_step(st_, W, g)
    assert np.all(np.sign(W) == -np.sign(g))


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adam_step(OptimizerState(), np.zeros(2), np.array([np.nan, 0]))
    with pytest.raises(ValueError):
        adam_step(OptimizerState(), np.zeros(2), np.zeros(3))


def test_predict_examples(rng):
    store = EmbeddingStore(["cat", "dog"], rng.standard_normal((2, 3)))
    m = ProjectionModel(np.eye(3))
    assert predict(m, rng.standard_normal(3), ["cat"], store)[0] == "cat"
    label, s = predict(m, store.vector("dog"), ["cat", "dog"], store)
    assert label == "dog" and s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        predict(m, [1, 0, 0], [], store)


def test_predict_ties_first():
    store = EmbeddingStore(["a", "b"], [[1, 0], [1, 0.0000]], normalize=True)
    assert predict(ProjectionModel(np.eye(2)), [1, 0], ["b", "a"], store)[0] == "b"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_predict_scale_invariant(seed, alpha):
    r = np.random.default_rng(seed)
    store = EmbeddingStore([f"c{i}" for i in range(6)], r.standard_normal((6, 4)))
    m = ProjectionModel(r.standard_normal((4, 5)))
    phi = r.standard_normal(5)
    a, sa = predict(m, phi, store.tokens, store)
    b, sb = predict(m, alpha * phi, store.tokens, store)
    assert a == b and sa == pytest.approx(sb, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_argmax_invariant_to_increasing_affine(seed, slope, shift):
    r = np.random.default_rng(seed)
    store = EmbeddingStore([f"c{i}" for i in range(6)], r.standard_normal((6, 4)))
    m = ProjectionModel(r.standard_normal((4, 5)))
    s = score(m, r.standard_normal(5), store.tokens, store)
    assert np.argmax(s) == np.argmax(slope * s + shift)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = ProjectionModel(rng.standard_normal((3, 5)))
    save_model(tmp_path / "m.zsdm", m)
    raw = (tmp_path / "m.zsdm").read_bytes()
    assert raw[:4] == b"ZSDM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 5 and int.from_bytes(raw[12:16], "little") == 3
    assert len(raw) == 16 + 8 * 15
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f8").reshape(3, 5), m.W)
    np.testing.assert_array_equal(load_model(tmp_path / "m.zsdm").W, m.W)


def test_checkpoint_corrupt(tmp_path):
    p = tmp_path / "bad.zsdm"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        load_model(p)
    p.write_bytes(b"ZSDM" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little"))
    with pytest.raises(ValueError, match="bytes"):
        load_model(p)
