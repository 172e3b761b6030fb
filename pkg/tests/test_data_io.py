import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import clustered_class_store, random_store
from zsd.data_io import (ClusteringError, DatasetManifest, FeatureFormatError, ImageRecord, ProposalRecord,
                         build_training_set, generate_synthetic, load_features, load_manifest, make_split,
                         save_manifest, write_features)
from zsd.embeddings import EmbeddingStore
from zsd.geometry import Box, iou
from zsd.model import ProjectionModel, batch_loss, predict_batch


def test_features_empty(tmp_path):
    write_features(tmp_path / "f.zsdf", np.zeros((0, 7), dtype=np.float32))
    X = load_features(tmp_path / "f.zsdf")
    assert X.shape == (0, 7)


def test_features_roundtrip(tmp_path, rng):
    X = rng.standard_normal((13, 5)).astype(np.float32)
    write_features(tmp_path / "f.zsdf", X)
    raw = (tmp_path / "f.zsdf").read_bytes()
    assert raw[:4] == b"ZSDF" and struct.unpack("<III", raw[4:16]) == (1, 13, 5)
    Y = load_features(tmp_path / "f.zsdf")
    assert Y.tobytes() == X.tobytes()


def test_features_truncated(tmp_path):
    p = tmp_path / "f.zsdf"
    p.write_bytes(b"ZSDF" + struct.pack("<III", 1, 5, 3) + np.zeros((4, 3), "<f4").tobytes())
    with pytest.raises(FeatureFormatError, match="offset 64"):
        load_features(p)


@pytest.mark.parametrize("blob, where", [(b"ZSDX" + bytes(12), "offset 0"),
                                         (b"ZSDF" + struct.pack("<III", 2, 0, 0), "offset 4"),
                                         (b"ZSDF\x01\x00", "offset 6")])
def test_features_bad_header(tmp_path, blob, where):
    p = tmp_path / "f.zsdf"
    p.write_bytes(blob)
    with pytest.raises(FeatureFormatError, match=where):
        load_features(p)


def test_features_nonfinite(tmp_path):
    X = np.zeros((3, 2), np.float32)
    X[2, 1] = np.inf
    write_features(tmp_path / "f.zsdf", X)
    with pytest.raises(FeatureFormatError, match="row 2"):
        load_features(tmp_path / "f.zsdf")


@settings(max_examples=25, deadline=None)
@given(st.binary(max_size=64))
def test_corrupt_headers_rejected(tmp_path_factory, junk):
    p = tmp_path_factory.mktemp("f") / "f.zsdf"
    p.write_bytes(b"ZSDF" + junk)
    try:
        X = load_features(p)
    except FeatureFormatError:
        return
    # only a self-consistent header can load
    v, n, d = struct.unpack("<III", junk[:12])
    assert v == 1 and len(junk) == 12 + 4 * n * d and X.shape == (n, d)


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest(["cat"], [ImageRecord("img1", [(Box(0, 0, 10, 10), "cat")],
                                              [ProposalRecord(Box(1, 1, 9, 9), 0.5, 0)])])
    save_manifest(tmp_path / "m.json", m)
    back = load_manifest(tmp_path / "m.json", n_features=1)
    assert back.to_dict() == m.to_dict()
    with pytest.raises(ValueError, match="out of range"):
        load_manifest(tmp_path / "m.json", n_features=0)
    bad = DatasetManifest(["dog"], m.images)
    with pytest.raises(ValueError, match="undeclared"):
        bad.validate()


def test_manifest_filter_unseen():
    im1 = ImageRecord("1", [(Box(0, 0, 1, 1), "a")])
    im2 = ImageRecord("2", [(Box(0, 0, 1, 1), "b")])
    assert [i.image_id for i in DatasetManifest(["a", "b"], [im1, im2]).without_images_containing(["b"]).images] == ["1"]


# --- splits -----------------------------------------------------------------

def test_split_single_cluster(rng):
    store = random_store(rng, 10, 8)
    s = make_split(store.tokens, store, 1, 0.2, seed=3)
    assert len(s.seen) == 8 and len(s.unseen) == 2


def test_split_deterministic(rng):
    store = random_store(rng, 30, 8)
    a, b = (make_split(store.tokens, store, 4, 0.2, seed=11) for _ in range(2))
    assert a.to_json() == b.to_json() and a.cluster_assignments == b.cluster_assignments


def test_split_mscoco_like():
    store = clustered_class_store()
    s = make_split(store.tokens, store, 10, 0.2, seed=7)
    assert (len(s.seen), len(s.unseen)) == (48, 17)
    sizes = sorted(len(m) for m in s.clusters().values())
    assert sizes == sorted((6, 6, 6, 6, 6, 5, 5, 5, 10, 10))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6), st.sampled_from([0.1, 0.2, 0.5]))
def test_split_invariants(seed, k, frac):
    rng = np.random.default_rng(seed)
    store = random_store(rng, 25, 6)
    s = make_split(store.tokens, store, k, frac, seed=seed)
    assert not set(s.seen) & set(s.unseen)
    assert set(s.seen) | set(s.unseen) == set(store.tokens)
    unseen = set(s.unseen)
    for members in s.clusters().values():
        n_u = sum(t in unseen for t in members)
        assert n_u == math.ceil(frac * len(members) - 1e-9)
        assert abs(n_u - frac * len(members)) <= 1


def test_split_empty_cluster_error():
    # three distinct directions cannot fill five clusters
    v = np.repeat(np.eye(3), 4, axis=0)
    store = EmbeddingStore([f"t{i}" for i in range(12)], v)
    with pytest.raises(ClusteringError):
        make_split(store.tokens, store, 5, 0.2, seed=0, restarts=2)


def test_split_bad_k(rng):
    store = random_store(rng, 5, 4)
    with pytest.raises(ValueError):
        make_split(store.tokens, store, 6)


# --- training set construction ----------------------------------------------

def _manifest_with(gt, proposals, classes=("cat", "dog", "zebra")):
    return DatasetManifest(list(classes), [ImageRecord("i", gt, [ProposalRecord(b, 1.0, r) for r, b in enumerate(proposals)])])


def test_build_no_ground_truth():
    boxes = [Box(10 * i, 0, 10 * i + 5, 5) for i in range(6)]
    m = _manifest_with([], boxes)
    ts = build_training_set(m, np.eye(6), ["cat"], negatives_per_image=3, seed=0)
    assert len(ts.positives) == 0 and len(ts.background) == 3
    assert ts.counts["background_zero_iou"] == 3


def test_build_positive_and_bands():
    cat = Box(0, 0, 10, 10)
    props = [cat, Box(9, 0, 19, 10), Box(0, 0, 10, 3.5), Box(50, 50, 60, 60)]
    m = _manifest_with([(cat, "cat")], props)
    X = np.arange(16.0).reshape(4, 4)
    ts = build_training_set(m, X, ["cat"], negatives_per_image=0)
    assert ts.positives.labels == ["cat"]
    np.testing.assert_array_equal(ts.positives.features[0], X[0])
    assert ts.background_rows == [1]
    assert ts.counts["discard"] == 2


def test_build_excludes_unseen():
    z = Box(0, 0, 10, 10)
    m = _manifest_with([(z, "zebra"), (Box(30, 30, 40, 40), "cat")], [z, Box(30, 30, 40, 40)])
    ts = build_training_set(m, np.eye(2), ["cat"], unseen_classes=["zebra"])
    assert ts.positives.labels == ["cat"]
    assert ts.counts["excluded_unseen"] == 1


def test_build_regimes_on_synthetic():
    task = generate_synthetic(6, 2, 3, 10, 6, 20, 2, 0.0, seed=0, background_per_image=4)
    ts = build_training_set(task.train, task.features, task.seen, 3, seed=0, unseen_classes=task.unseen)
    # 2 regions x (1 gt + 2 jitter) positives, 2 near-miss + 3 sampled zero-IoU backgrounds per image
    assert ts.counts["positive"] == 20 * 6
    assert ts.counts["background_low_iou"] == 20 * 2
    assert ts.counts["background_zero_iou"] == 20 * 3
    assert set(ts.positives.labels) <= set(task.seen)
    assert set(ts.background_rows) <= task.background_rows
    assert len(ts.sb_samples()) == len(ts.positives) + len(ts.background)


# --- synthetic generator ----------------------------------------------------

def test_synthetic_noiseless_features():
    task = generate_synthetic(5, 3, 2, 12, 6, 10, 3, 0.0, seed=2)
    for row, label in task.hidden_labels.items():
        want = (task.A @ task.store.vector(label)).astype(np.float32)
        np.testing.assert_array_equal(task.features[row], want)


def test_synthetic_deterministic():
    a = generate_synthetic(5, 3, 2, 12, 6, 10, 3, 0.1, seed=2)
    b = generate_synthetic(5, 3, 2, 12, 6, 10, 3, 0.1, seed=2)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.train.to_dict() == b.train.to_dict() and a.test.to_dict() == b.test.to_dict()
    assert a.hidden_labels == b.hidden_labels


def test_synthetic_layout():
    task = generate_synthetic(5, 3, 2, 12, 6, 10, 3, 0.0, seed=4)
    A_cond = np.linalg.cond(task.A)
    assert A_cond <= 2.0 + 1e-9
    for im in task.train.images + task.test.images:
        gts = [g for g, _ in im.ground_truth]
        for i, a in enumerate(gts):
            for b in gts[i + 1:]:
                assert iou(a, b) == 0
        assert all(l in task.seen for _, l in im.ground_truth) or all(l in task.unseen for _, l in im.ground_truth)
    assert {l for im in task.test.images for _, l in im.ground_truth} <= set(task.unseen)
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(5, 3, 2, 12, 6, 1, 3, 0.0, grid=2)


def test_pseudoinverse_recovers_labels():
    task = generate_synthetic(20, 5, 4, 24, 12, 30, 3, 0.0, seed=6)
    oracle = ProjectionModel(np.linalg.pinv(task.A))
    for manifest, classes in ((task.train, task.seen), (task.test, task.unseen)):
        rows = [p.feature_row for im in manifest.images for p in im.proposals if p.feature_row not in task.background_rows]
        idx, s = predict_batch(oracle, task.features[rows].astype(float), task.store.matrix(classes))
        assert [classes[i] for i in idx] == [task.hidden_labels[r] for r in rows]
        assert np.allclose(s, 1.0, atol=1e-5)


def test_noiseless_orthogonal_task_has_zero_hinge_witness():
    task = generate_synthetic(6, 2, 3, 16, 12, 10, 3, 0.0, seed=1, orthogonal=True)
    rows = [p.feature_row for im in task.train.images for p in im.proposals if p.feature_row not in task.background_rows]
    y = np.array([task.seen.index(task.hidden_labels[r]) for r in rows])
    X = np.array([task.A @ task.store.vector(task.hidden_labels[r]) for r in rows])
    _, hinge, _ = batch_loss(np.linalg.pinv(task.A), X, y, task.store.matrix(task.seen), 1.0, 0.0)
    assert hinge < 1e-12
