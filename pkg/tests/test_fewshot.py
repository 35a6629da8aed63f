"""Frozen-encoder features and the few-shot classifier heads."""

import numpy as np
import pytest

from relvae.autodiff import Tensor
from relvae.dataio import BBox, ContextInput, ObjectInstance, SceneRecord, SynthConfig, \
    generate_synthetic_dataset, iter_contexts
from relvae.encoder import SPATIAL_DIM
from relvae.fewshot import (ClassifierHead, ContextFeature, HeadConfig, KNNIndex,
                            baseline_features, embed_contexts, knn1_predict,
                            knn_score_map, load_head, predict, predict_scores,
                            save_head, train_head)
from relvae.nnet import param_fingerprint
from relvae.trainer import TrainConfig, pretrain

RNG = np.random.default_rng


@pytest.fixture(scope="module")
def trained():
    scenes, table = generate_synthetic_dataset(SynthConfig(n_scenes=4), seed=1)
    cfg = TrainConfig(steps=5, seed=0, batch_size=8, conv_channels=(4, 6, 8), d_z=6,
                      d_att=4, fusion_hidden=16, decoder_hidden=16)
    ckpt = pretrain(scenes, table, cfg)
    from relvae.trainer import build_model

    return build_model(ckpt), scenes, table


def _features(n, d=6, seed=0, spread=4.0):
    rng = RNG(seed)
    return [ContextFeature(vector=(spread * rng.standard_normal(d)).astype(np.float32),
                           image_id=f"s{i}", relation_index=0) for i in range(n)]


# -- embed_contexts ----------------------------------------------------------------


def test_embed_deterministic_and_ordered(trained):
    model, scenes, table = trained
    contexts = [c for c, _ in iter_contexts(scenes, False)][:6]
    f1 = embed_contexts(model, contexts, table)
    f2 = embed_contexts(model, contexts, table)
    assert len(f1) == 6
    for a, b, ctx in zip(f1, f2, contexts):
        np.testing.assert_array_equal(a.vector, b.vector)
        assert a.image_id == ctx.scene.image_id


def test_embed_equals_encoder_mu(trained):
    model, scenes, table = trained
    ctx = next(iter_contexts(scenes, False))[0]
    feat = embed_contexts(model, [ctx], table)[0]
    params, _ = model.encode_context(ctx, table)
    np.testing.assert_array_equal(feat.vector, params.mu)


def test_encoder_frozen_through_head_training(trained):
    model, scenes, table = trained
    before = param_fingerprint(model.parameters())
    contexts = [c for c, _ in iter_contexts(scenes, False)][:8]
    feats = embed_contexts(model, contexts, table)
    train_head(feats, [f"p{i % 2}" for i in range(8)], HeadConfig(steps=20))
    assert param_fingerprint(model.parameters()) == before


# -- train_head ---------------------------------------------------------------------


def test_head_separates_one_shot_sets():
    # validated empirically: an overparameterized head memorizes 8 distinct points
    feats = _features(8, seed=3)
    labels = [f"pred{i}" for i in range(8)]
    head = train_head(feats, labels, HeadConfig(steps=500))
    correct = sum(max(predict_scores(head, f.vector), key=lambda p: (predict_scores(head, f.vector)[p], p)) == l
                  for f, l in zip(feats, labels))
    assert correct == 8


def test_head_cannot_separate_identical_features():
    v = RNG(0).standard_normal(6).astype(np.float32)
    feats = [ContextFeature(v, "a", 0), ContextFeature(v.copy(), "b", 0)]
    head = train_head(feats, ["x", "y"], HeadConfig(steps=200))
    preds = [max(head.vocab, key=lambda p: predict_scores(head, f.vector)[p]) for f in feats]
    assert preds[0] == preds[1]  # identical inputs force identical outputs


def test_head_training_deterministic():
    feats = _features(10, seed=5)
    labels = [f"p{i % 3}" for i in range(10)]
    h1 = train_head(feats, labels, HeadConfig(steps=50, seed=4))
    h2 = train_head(feats, labels, HeadConfig(steps=50, seed=4))
    for k, p in h1.parameters().items():
        np.testing.assert_array_equal(p.data, h2.parameters()[k].data)


def test_head_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train_head(np.zeros((0, 4)), [], HeadConfig())
    with pytest.raises(ValueError, match="outside vocabulary"):
        train_head(np.zeros((2, 4)), ["a", "b"], HeadConfig(), vocab=["a"])


# -- predict -----------------------------------------------------------------------


def test_predict_softmax_sums_to_one():
    head = train_head(_features(6, seed=1), [f"p{i % 2}" for i in range(6)],
                      HeadConfig(steps=10))
    scores = predict(head, _features(1, seed=9)[0].vector)
    e = np.exp(scores - scores.max())
    assert (e / e.sum()).sum() == pytest.approx(1.0)


def test_predict_zero_weight_head_uniform():
    head = ClassifierHead(4, ["a", "b", "c"], HeadConfig())
    for p in head.parameters().values():
        p.data = np.zeros_like(p.data)
    scores = predict(head, np.ones(4, dtype=np.float32))
    np.testing.assert_array_equal(scores, np.zeros(3))


def test_predict_dim_mismatch():
    head = ClassifierHead(4, ["a"], HeadConfig())
    with pytest.raises(ValueError, match="shape"):
        predict(head, np.ones(5))


# -- knn1 -------------------------------------------------------------------------


def test_knn1_exact_support_point():
    feats = np.stack([f.vector for f in _features(5, seed=2)])
    idx = KNNIndex(feats, [f"p{i}" for i in range(5)])
    assert knn1_predict(idx, feats[3]) == "p3"


def test_knn1_single_support():
    idx = KNNIndex(np.ones((1, 4), dtype=np.float32), ["only"])
    assert knn1_predict(idx, RNG(0).standard_normal(4)) == "only"


def test_knn1_matches_bruteforce_oracle():
    rng = RNG(11)
    feats = rng.standard_normal((20, 6)).astype(np.float32)
    labels = [f"p{int(i)}" for i in rng.integers(0, 5, size=20)]
    idx = KNNIndex(feats, labels)
    for _ in range(50):
        q = rng.standard_normal(6)
        got = knn1_predict(idx, q)
        dists = [float(np.sqrt(((feats[i] - q) ** 2).sum())) for i in range(20)]
        best = min(range(20), key=lambda i: (dists[i], labels[i]))
        assert got == labels[best]


def test_knn1_tie_breaks_lexicographic():
    feats = np.array([[1.0, 0.0], [-1.0, 0.0]], dtype=np.float32)
    idx = KNNIndex(feats, ["zeta", "alpha"])
    assert knn1_predict(idx, np.zeros(2)) == "alpha"


def test_knn1_empty_support():
    idx = KNNIndex(np.zeros((0, 3), dtype=np.float32), [])
    with pytest.raises(ValueError, match="empty support"):
        knn1_predict(idx, np.zeros(3))


def test_knn_score_map_argmax_matches_knn1():
    rng = RNG(13)
    feats = rng.standard_normal((15, 4)).astype(np.float32)
    labels = [f"p{int(i)}" for i in rng.integers(0, 4, size=15)]
    idx = KNNIndex(feats, labels, vocab=[f"p{i}" for i in range(6)])
    for _ in range(30):
        q = rng.standard_normal(4)
        scores = knn_score_map(idx, q)
        assert set(scores) == set(idx.vocab)
        best = min(scores, key=lambda p: (-scores[p], p))
        assert best == knn1_predict(idx, q)


# -- baseline featurizer -------------------------------------------------------------


def _ctx(b_s, b_o):
    objs = (ObjectInstance(0, "red-circle", b_s), ObjectInstance(1, "blue-square", b_o))
    scene = SceneRecord("x", 64, 64, "synthetic", objs, ())
    return ContextInput(scene, objs[0], objs[1])


def test_baseline_feature_dimension(trained):
    _, scenes, table = trained
    ctx = next(iter_contexts(scenes, False))[0]
    f = baseline_features(ctx, table)
    assert f.shape == (2 * table.dim + SPATIAL_DIM,)


def test_baseline_same_semantics_differ_only_spatially(trained):
    _, _, table = trained
    f1 = baseline_features(_ctx(BBox(0, 0, 10, 10), BBox(20, 20, 40, 40)), table)
    f2 = baseline_features(_ctx(BBox(5, 5, 15, 15), BBox(20, 20, 40, 40)), table)
    d = 2 * table.dim
    np.testing.assert_array_equal(f1[:d], f2[:d])
    assert not np.array_equal(f1[d:], f2[d:])


def test_baseline_swap_flips_center_deltas(trained):
    _, _, table = trained
    b1, b2 = BBox(0, 0, 10, 10), BBox(30, 40, 40, 50)
    f_fwd = baseline_features(_ctx(b1, b2), table)
    f_rev = baseline_features(_ctx(b2, b1), table)
    d = 2 * table.dim
    np.testing.assert_allclose(f_fwd[d + 8:d + 10], -f_rev[d + 8:d + 10], atol=1e-12)


# -- head files ------------------------------------------------------------------------


def test_head_file_round_trip(tmp_path):
    feats = _features(6, seed=1)
    labels = [f"p{i % 2}" for i in range(6)]
    head = train_head(feats, labels, HeadConfig(steps=20))
    save_head(head, tmp_path / "head.rvhd")
    loaded = load_head(tmp_path / "head.rvhd")
    q = _features(1, seed=8)[0].vector
    np.testing.assert_array_equal(predict(head, q), predict(loaded, q))
    assert loaded.vocab == head.vocab

    idx = KNNIndex(np.stack([f.vector for f in feats]), labels)
    save_head(idx, tmp_path / "knn.rvhd")
    loaded_idx = load_head(tmp_path / "knn.rvhd")
    np.testing.assert_array_equal(loaded_idx.features, idx.features)
    assert loaded_idx.labels == idx.labels
