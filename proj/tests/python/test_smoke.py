import json

import numpy as np
import pytest

import dddr

TINY = {
    "experiment.n_tasks": 2,
    "data.classes": 4,
    "data.samples_per_class": 16,
    "data.image_size": 8,
    "federation.clients": 2,
    "pretrain.samples_per_class": 8,
    "pretrain.steps": 30,
    "pretrain.batch": 16,
    "pretrain.hidden": 32,
    "pretrain.layers": 1,
    "pretrain.timesteps": 10,
    "pretrain.embed_dim": 4,
    "pretrain.time_dim": 4,
    "inversion.rounds": 2,
    "inversion.local_steps": 3,
    "inversion.batch": 8,
    "inversion.eval_rows": 8,
    "training.rounds": 2,
    "training.epochs": 1,
    "training.batch": 8,
    "replay.past": 6,
    "replay.current": 6,
    "classifier.hidden": 16,
    "classifier.feature_dim": 8,
    "classifier.proj_hidden": 8,
    "classifier.proj_dim": 4,
}


def test_config_overrides_and_errors():
    cfg = dddr.effective_config(overrides={"loss.w2": 0.25, "experiment.method": "finetune"})
    assert cfg["loss"]["w2"] == 0.25
    assert cfg["experiment"]["method"] == "finetune"
    assert "training.rounds" in dddr.config_keys()
    with pytest.raises(dddr.UsageError, match="loss.w2"):
        dddr.effective_config(overrides={"loss.w2": "abc"})


def test_shapeworld_is_deterministic():
    x, y = dddr.shapeworld(5, seed=3)
    x2, y2 = dddr.shapeworld(5, seed=3)
    assert x.shape == (40, 16, 16) and y.shape == (40,)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert sorted(set(y.tolist())) == list(range(8))


def test_schedule_and_forward_diffusion():
    ab = np.array(dddr.alphas_bar(4, 0.1, 0.4))
    assert np.allclose(ab, [0.9, 0.72, 0.504, 0.3024])
    z0 = np.full((1, 3), 0.5, dtype=np.float32)
    z = dddr.forward_diffuse(z0, 1, np.zeros_like(z0))
    assert np.allclose(z, np.sqrt(dddr.alphas_bar(100, 1e-3, 0.2)[0]) * 0.5)


def test_aggregation_and_metrics():
    mean = dddr.aggregate_embeddings([np.array([1, 2], np.float32), np.array([3, 4], np.float32)])
    assert np.array_equal(mean.ravel(), [2, 3])
    w = dddr.weighted_average([np.array([0, 2], np.float32), np.array([4, 6], np.float32)], [1, 3])
    assert np.allclose(w, [3, 5])
    tc = [[0, 1], [2]]
    rows = [{0: 1.0, 1: 0.5}, {0: 0.5, 1: 0.5, 2: 1.0}]
    assert dddr.average_accuracy(tc, rows) == pytest.approx(2.0 / 3.0)
    assert dddr.forgetting_measure(tc, rows) == pytest.approx(0.5 / 3.0)
    with pytest.raises(dddr.DataError):
        dddr.average_accuracy(tc, [{0: 1.0}])
    a = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    assert dddr.psnr(a, a) == 99.0
    assert dddr.ssim(a, a) == pytest.approx(1.0)


def test_run_eval_and_stages(tmp_path):
    lines = []
    r = dddr.run(tmp_path / "a", overrides=TINY, progress=lines.append)
    assert r["guard_past_reads"] == 0 and r["guard_reads"] > 0
    assert 0.0 <= r["metrics"]["average_accuracy"] <= 1.0
    assert lines
    stored = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert dddr.evaluate(tmp_path / "a") == stored
    assert [a["class"] for a in dddr.audit(tmp_path / "a")] == [0, 1, 2, 3]

    b = tmp_path / "b"
    assert dddr.stage("gen-data", b, overrides=TINY) is None
    checksum = dddr.stage("pretrain", b, overrides=TINY)
    assert dddr.stage("invert", b, overrides=TINY) == 4
    staged = dddr.stage("train", b, overrides=TINY)
    assert staged["metrics"] == r["metrics"]
    assert (b / "metrics.json").read_bytes() == (tmp_path / "a" / "metrics.json").read_bytes()

    model = dddr.DiffusionModel.load(b / "checkpoints" / "denoiser.ckpt")
    assert model.frozen_checksum() == checksum
    x = model.sample(model.class_embedding(0), 3, seed=1)
    assert x.shape == (3, 64) and np.array_equal(x, model.sample(model.class_embedding(0), 3, seed=1))


def test_missing_artifacts(tmp_path):
    with pytest.raises(dddr.DataError, match="meta.json"):
        dddr.stage("invert", tmp_path, overrides=TINY)
