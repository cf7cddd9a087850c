import json
import math

import numpy as np
import pytest

import soap_fsar as sf

TINY_CONFIG = {
    "n_way": 2,
    "k_shot": 1,
    "queries_per_class": 1,
    "frames": 4,
    "channels": 2,
    "height": 8,
    "width": 8,
    "tuple_set": [1, 2],
    "c_r": 4,
    "embed_dim": 16,
    "d_k": 8,
    "d_v": 8,
    "backbone": [[4, 3], [8, 3]],
    "seed": 3,
}


def tiny_model():
    return sf.SoapNet(json.dumps(TINY_CONFIG))


def random_clip(rng, f=4, c=2, h=8, w=8):
    return rng.uniform(0.0, 1.0, size=(f, c, h, w))


def test_sliding_windows():
    rng = np.random.default_rng(0)
    clip = rng.uniform(size=(8, 1, 4, 4))
    windows = sf.sliding_windows(clip, 3)
    assert len(windows) == 6
    assert windows[0].shape == (3, 1, 4, 4)
    np.testing.assert_allclose(windows[2], clip[2:5])


def test_enhance_shapes_and_fusion():
    rng = np.random.default_rng(1)
    model = tiny_model()
    clip = random_clip(rng)
    bundle = model.enhance(clip)
    for key in ("p3d", "pcw", "pmotion", "fused"):
        assert bundle[key].shape == clip.shape
    np.testing.assert_allclose(
        bundle["fused"], bundle["p3d"] + bundle["pcw"] + bundle["pmotion"] + clip, atol=1e-12
    )
    # gated residuals stay between the clip and twice the clip
    positive = np.abs(clip) + 0.01
    enhanced = model.enhance(positive)
    assert np.all(enhanced["p3d"] > positive)
    assert np.all(enhanced["p3d"] < 2.0 * positive)


def test_features_shape():
    rng = np.random.default_rng(2)
    model = tiny_model()
    feats = model.features(random_clip(rng))
    assert feats.shape == (4, 16)
    assert np.all(np.isfinite(feats))


def test_predict_and_loss():
    rng = np.random.default_rng(3)
    model = tiny_model()
    support = [[random_clip(rng)], [random_clip(rng)]]
    queries = [random_clip(rng), random_clip(rng)]
    preds = model.predict(support, queries)
    assert len(preds) == 2
    assert all(p in (0, 1) for p in preds)
    loss = model.episode_loss(support, queries, [0, 1])
    assert math.isfinite(loss)
    assert abs(loss - math.log(2.0)) < 0.7


def test_loss_ce_and_classify():
    assert abs(sf.loss_ce([1.0] * 5, 2) - math.log(5.0)) < 1e-9
    assert sf.classify([3.0, 1.0, 2.0]) == 1
    with pytest.raises(Exception):
        sf.classify([])


def test_position_embedding():
    pe = sf.position_embedding(1, "sinusoidal", 8, 4)
    np.testing.assert_allclose(pe, [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-12)


def test_reverse_order_involution():
    rng = np.random.default_rng(4)
    clip = random_clip(rng)
    np.testing.assert_array_equal(sf.reverse_order(sf.reverse_order(clip)), clip)


def test_gradcheck():
    report = sf.gradcheck(seed=1, samples=2)
    assert report["pass"]
    assert report["max_rel_err"] <= 1e-4


def test_generate_train_eval_roundtrip(tmp_path):
    spec = {
        "seed": 7,
        "clips_per_class": 6,
        "clip_length": 8,
        "channels": 2,
        "height": 8,
        "width": 8,
        "classes": [
            {"name": "right", "kind": "translate-right", "speed": 1.0, "object_size": 3},
            {"name": "left", "kind": "translate-left", "speed": 1.0, "object_size": 3},
            {"name": "still", "kind": "static-textured"},
        ],
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    data_dir = tmp_path / "data"
    sf.generate_dataset(str(spec_path), str(data_dir))
    assert (data_dir / "manifest.json").exists()

    cfg = dict(TINY_CONFIG)
    cfg.update(dataset=str(data_dir), episodes_train=3, episodes_eval=5, metrics_every=1)
    out_dir = tmp_path / "run"
    result = sf.train(json.dumps(cfg), str(out_dir))
    assert result["episodes"] == 3
    assert math.isfinite(result["final_loss"])

    summary = sf.evaluate(json.dumps(cfg), result["checkpoint_dir"])
    assert summary["episodes"] == 5
    assert 0.0 <= summary["accuracy"] <= 1.0

    model = sf.SoapNet.load(result["checkpoint_dir"])
    names = model.param_names()
    assert "p3d.conv.w" in names and "head.lambda.w" in names
    assert model.get_param("p3d.conv.w").shape == (1, 1, 3, 3, 3)
