import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsupt.dsu import (FEAT_MAGIC, KMEANS_SAMPLING_GROUPS, KMEANS_SAMPLING_QUOTAS, FeatureSequence,
                       KmeansModel, Utterance, inertia, kmeans_assign, kmeans_fit, pool_hash,
                       pool_size, read_feature_header, read_features, read_manifest,
                       sample_training_pool, write_features, write_manifest)


def brute_nearest(frames, centroids):
    out = []
    for f in frames:
        d = [float(((f - c) ** 2).sum()) for c in centroids]
        out.append(min(range(len(d)), key=lambda j: (d[j], j)))
    return out


# -- files -------------------------------------------------------------------------------------

def test_feature_file_layout(tmp_path):
    m = np.arange(6, dtype=float).reshape(3, 2)
    write_features(tmp_path / "u.feat", m)
    raw = (tmp_path / "u.feat").read_bytes()
    assert raw[:4] == FEAT_MAGIC
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 3, 2]
    assert np.frombuffer(raw[16:], "<f4").tolist() == m.ravel().tolist()
    assert read_feature_header(tmp_path / "u.feat") == (3, 2)
    np.testing.assert_array_equal(read_features(tmp_path / "u.feat"), m)


def test_feature_file_errors(tmp_path):
    with pytest.raises(ValueError):
        write_features(tmp_path / "a.feat", np.array([[np.nan]]))
    with pytest.raises(ValueError):
        write_features(tmp_path / "a.feat", np.zeros((0, 3)))
    (tmp_path / "b.feat").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        read_features(tmp_path / "b.feat")


def test_manifest_round_trip(tmp_path):
    rows = [Utterance("a", "feats/a.feat", "feats/a.fbk", 12, "ba di", "foo bar", "xx"),
            Utterance("b", "feats/b.feat", "feats/b.fbk", 7, "ko", "baz", "yy")]
    write_manifest(tmp_path / "m.tsv", rows)
    header = (tmp_path / "m.tsv").read_text().splitlines()[0]
    assert header == "id\tfeat_path\tfbk_path\tn_frames\ttranscript\ttranslation\tlang"
    back = read_manifest(tmp_path / "m.tsv")
    assert back == rows
    assert back[0].ssl_file() == tmp_path / "feats/a.feat"
    (tmp_path / "bad.tsv").write_text("id\tfoo\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.tsv")


def test_feature_sequence_invariants():
    with pytest.raises(ValueError):
        FeatureSequence("u", np.zeros((0, 2)))
    with pytest.raises(ValueError):
        FeatureSequence("u", np.array([[np.inf]]))


# -- fitting -------------------------------------------------------------------------------

def test_exact_cover():
    pts = np.array([[0.0, 0.0], [1.0, 5.0], [3.0, -2.0]])
    model = kmeans_fit(pts, 3, iters=5)
    assert inertia(pts, model.centroids) == 0.0
    assert sorted(map(tuple, model.centroids)) == sorted(map(tuple, pts))


def test_two_clusters_on_a_line():
    x = np.array([[0.0], [1.0], [9.0], [10.0]])
    # brute force over all 2-partitions
    best = min((sum(((x[list(g)] - x[list(g)].mean()) ** 2).sum() for g in (a, b) if g), a, b)
               for r in range(1, 4) for a in itertools.combinations(range(4), r)
               for b in [tuple(i for i in range(4) if i not in a)])
    expect = sorted(float(x[list(g)].mean()) for g in best[1:])
    model = kmeans_fit(x, 2, iters=20)
    assert sorted(model.centroids.ravel().tolist()) == pytest.approx(expect) == [0.5, 9.5]


def test_fit_errors():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)) + np.arange(3)[:, None], 5)
    with pytest.raises(ValueError):
        kmeans_fit(np.ones((10, 2)), 3)
    with pytest.raises(ValueError):
        kmeans_fit(np.random.default_rng(0).standard_normal((10, 2)), 2, batch_size=11)
    with pytest.raises(ValueError):
        kmeans_fit(np.random.default_rng(0).standard_normal((10, 2)), 2, n_init=0)


def test_full_batch_inertia_never_increases():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((120, 3)) + rng.integers(0, 4, (120, 1)) * 3.0
        hist = kmeans_fit(x, 6, iters=25, seed=seed, track_inertia=True).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:])), seed


def test_minibatch_is_seeded_and_reasonable():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((4, 2)) * 10
    x = np.repeat(centers, 50, axis=0) + rng.standard_normal((200, 2)) * 0.1
    a = kmeans_fit(x, 4, batch_size=32, iters=60, seed=3)
    b = kmeans_fit(x, 4, batch_size=32, iters=60, seed=3)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert inertia(x, a.centroids) < 0.05 * inertia(x, x.mean(0, keepdims=True))


def test_restarts_never_hurt():
    x = np.random.default_rng(1).standard_normal((200, 2))
    one = kmeans_fit(x, 8, iters=10, seed=4)
    many = kmeans_fit(x, 8, iters=10, seed=4, n_init=4)
    assert inertia(x, many.centroids) <= inertia(x, one.centroids)


def test_model_save_load(tmp_path):
    model = KmeansModel(np.arange(6.0).reshape(3, 2), 42)
    model.save(tmp_path / "km.npz")
    back = KmeansModel.load(tmp_path / "km.npz")
    np.testing.assert_array_equal(back.centroids, model.centroids)
    assert back.trained_on == 42 and back.k == 3


# -- assignment ------------------------------------------------------------------------------

def test_assign_exact_and_ties():
    c = np.array([[5.0, 5.0], [9.0, 9.0], [1.0, 0.0], [-7.0, 7.0], [8.0, -8.0], [-1.0, 0.0]])
    model = KmeansModel(c, 0)
    assert kmeans_assign(model, c).units == list(range(6))
    # the origin is equidistant to centroids 2 and 5
    assert kmeans_assign(model, np.zeros((1, 2))).units == [2]


def test_assign_dimension_mismatch():
    with pytest.raises(ValueError):
        kmeans_assign(KmeansModel(np.zeros((2, 3)), 0), np.zeros((4, 2)))


@given(st.integers(0, 2**31 - 1))
def test_assign_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(-3, 4, (7, 2)).astype(float)  # integer grid makes ties common
    f = rng.integers(-4, 5, (30, 2)).astype(float)
    assert kmeans_assign(KmeansModel(c, 0), f).units == brute_nearest(f, c)


def test_assign_is_order_independent_and_length_preserving(rng):
    model = KmeansModel(rng.standard_normal((5, 3)), 0)
    a, b = rng.standard_normal((11, 3)), rng.standard_normal((4, 3))
    joint = kmeans_assign(model, np.concatenate([a, b])).units
    assert joint == kmeans_assign(model, a).units + kmeans_assign(model, b).units
    assert len(joint) == 15


# -- clustering pool ------------------------------------------------------------------------

def _corpus(tmp_path, langs):
    rows = []
    rng = np.random.default_rng(0)
    for lang, n in langs.items():
        for i in range(n):
            uid = f"{lang}{i}"
            write_features(tmp_path / f"{uid}.feat", rng.standard_normal((3 + i % 2, 2)))
            rows.append(Utterance(uid, f"{uid}.feat", f"{uid}.fbk", 8, "", "", lang, root=tmp_path))
    return rows


def test_pool_sampling(tmp_path):
    rows = _corpus(tmp_path, {"a": 5, "b": 4, "c": 3})
    groups = {"High": ("a",), "Mid": ("b",), "Low": ("c",)}
    quotas = {"High": 2, "Mid": 2, "Low": 2}
    m1, ids1 = sample_training_pool(rows, groups, quotas, seed=1)
    m2, ids2 = sample_training_pool(rows, groups, quotas, seed=1)
    assert len(ids1) == 6 == pool_size(groups, quotas)
    assert ids1 == ids2 and pool_hash(m1) == pool_hash(m2)
    assert sum(u.startswith("a") for u in ids1) == 2
    _, ids3 = sample_training_pool(rows, groups, quotas, seed=2)
    assert ids3 != ids1
    with pytest.raises(ValueError, match="Low"):
        sample_training_pool(rows, groups, {**quotas, "Low": 4}, seed=1)
    with pytest.raises(ValueError, match="Empty"):
        sample_training_pool(rows, {**groups, "Empty": ("zz",)}, {**quotas, "Empty": 1})


def test_full_scale_pool_preset():
    assert pool_size(KMEANS_SAMPLING_GROUPS, KMEANS_SAMPLING_QUOTAS) == 98_000
    langs = [l for g in KMEANS_SAMPLING_GROUPS.values() for l in g]
    assert len(langs) == len(set(langs)) == 21
