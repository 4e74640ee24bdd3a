import itertools
import math

import numpy as np
import pytest

import skinlab


def test_toy_data_split_and_distribution(tmp_path):
    manifest = skinlab.generate_toy_dataset(str(tmp_path / "toy"), 3, [20, 10, 8], seed=1)
    assert len(manifest["records"]) == 38
    split = skinlab.stratified_split(manifest, seed=4)
    assert len(split["assignment"]) == 38
    sizes = {}
    for subset in split["assignment"].values():
        sizes[subset] = sizes.get(subset, 0) + 1
    assert set(sizes) == {"train", "validation", "test"}
    assert skinlab.stratified_split(manifest, seed=4) == split

    dist = skinlab.compute_distribution(manifest, split, "train")
    assert sum(dist["counts"].values()) == sizes["train"]
    plan = skinlab.plan_synthesis(manifest, split)
    assert plan["majority_count"] == max(dist["counts"].values())
    for cls, count in dist["counts"].items():
        assert count + plan["quotas"][cls] == plan["majority_count"]

    assert skinlab.apportion(7, [0.7, 0.15, 0.15]) == [5, 1, 1]


def test_binary_auc_against_pair_counting():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, 40).astype(float).tolist()
    positive = (rng.random(40) < 0.4).tolist()
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    assert skinlab.binary_auc(scores, positive) == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)


def test_metrics_report_on_perfect_predictions():
    probs = np.eye(3)[[0, 1, 2, 0, 1, 2]].tolist()
    report = skinlab.metrics_report(probs, [0, 1, 2, 0, 1, 2], ["a", "b", "c"])
    assert report["accuracy"] == 1.0


def test_shap_efficiency_and_lime_on_additive_model():
    weights = np.array([0.5, -0.25, 1.0, 0.0, 0.75])
    def model(masks):
        return 0.1 + masks @ weights

    shap = skinlab.shap_from_masks(model, 5)
    assert shap["exact"]
    assert sum(shap["attributions"]) == pytest.approx(shap["prediction_value"] - shap["baseline_value"], abs=1e-9)
    assert shap["attributions"] == pytest.approx(weights.tolist(), abs=1e-9)

    lime = skinlab.lime_from_masks(model, 5, n_samples=400, ridge_lambda=1e-6, seed=2)
    assert lime["weights"] == pytest.approx(weights.tolist(), abs=1e-3)
    assert lime["top_segments"][0] == 2


def test_superpixels_and_overlays():
    rng = np.random.default_rng(3)
    img = rng.random((40, 40, 3)).astype(np.float32)
    seg = skinlab.segment_superpixels(img, target_segments=10)
    assert seg.shape == (40, 40)
    assert seg.min() == 0
    overlay = skinlab.lime_overlay(img, seg, [0])
    heat = skinlab.shap_heatmap(img, seg, [0.0] * (int(seg.max()) + 1))
    assert overlay.shape == heat.shape == (40, 40, 3)


def test_config_resolution_and_errors(tmp_path):
    cfg = skinlab.resolve_config(sets=["gan.epochs=3"], seed=9, run_dir=str(tmp_path), toy_mode=True)
    assert cfg["gan"]["epochs"] == 3
    assert cfg["seed"] == 9
    assert cfg == skinlab.Pipeline(cfg).config

    with pytest.raises(skinlab.SkinlabError) as err:
        skinlab.resolve_config(sets=["gan.unknown=1"])
    assert err.value.code == "ConfigError"


def test_pipeline_stage_ordering(tmp_path):
    cfg = skinlab.default_config(toy_mode=True)
    cfg["paths"]["run_dir"] = str(tmp_path / "run")
    cfg["toy"]["classes"] = 3
    cfg["toy"]["per_class_counts"] = [12, 8, 6]
    pipe = skinlab.Pipeline(cfg)
    with pytest.raises(skinlab.SkinlabError) as err:
        pipe.evaluate()
    assert err.value.code == "StaleUpstream"
    assert not (tmp_path / "run").exists()

    assert not pipe.ingest()["skipped"]
    assert not pipe.split()["skipped"]
    assert pipe.split()["skipped"]
    ledger = pipe.ledger()
    assert ledger["stages"]["split"]["status"] == "done"
    assert pipe.stage_hash("split") != pipe.stage_hash("ingest")
    assert math.isfinite(len(pipe.stage_hash("report")))
