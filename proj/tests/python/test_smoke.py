import math

import numpy as np
import pytest

import tagnet


def test_distances():
    assert tagnet.jaccard(["sky", "sea"], ["sky", "sea"]) == 0.0
    assert tagnet.jaccard(["a", "b", "c"], ["b", "c", "d"]) == pytest.approx(0.5)
    assert tagnet.jaccard([], []) == 0.0
    assert tagnet.cosine_distance(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 - 1 / math.sqrt(2))
    assert tagnet.candidate_count(3, 6) == 20
    assert tagnet.candidate_count(12, 24) == 2704156


def test_average_precision():
    assert tagnet.average_precision([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx(5 / 6)
    assert tagnet.average_precision([0.9, 0.5], [0, 0]) is None


def test_evaluate_and_bound():
    rng = np.random.default_rng(0)
    truth = np.zeros((30, 8))
    for row in truth:
        row[rng.choice(8, size=3, replace=False)] = 1
    report = tagnet.evaluate(truth.copy(), truth, k=3)
    assert report["mAP_lab"] == pytest.approx(100.0)
    assert report["prec_img"] == pytest.approx(100.0)
    bound = tagnet.upper_bound(truth, 3)
    assert all(v == pytest.approx(100.0) for v in bound.values())
    noisy = tagnet.evaluate(rng.normal(size=truth.shape), truth)
    assert noisy["prec_img"] <= noisy["upper_bound"]["prec_img"] + 1e-9
    assert list(noisy)[:6] == ["mAP_lab", "mAP_img", "rec_lab", "prec_lab", "rec_img", "prec_img"]


def test_synth_corpus_is_reproducible():
    a = tagnet.synth_corpus(n=50, d=4, seed=3)
    b = tagnet.synth_corpus(n=50, d=4, seed=3)
    assert a["features"].shape == (50, 4)
    assert np.array_equal(a["features"], b["features"])
    assert [r["tags"] for r in a["records"]] == [r["tags"] for r in b["records"]]


@pytest.mark.parametrize("arch", tagnet.architectures())
def test_gradients(arch):
    report = tagnet.grad_check(arch, seed=1)
    assert report["max_rel_error"] < 1e-4


def test_model_forward_and_round_trip(tmp_path):
    config = {"arch": "ltn", "hidden": 8, "feature_dim": 3, "meta_dim": 0, "labels": 2, "m": 2, "M": 4,
              "n": "id", "f": None, "dropout": 0.5}
    model = tagnet.Model(config, seed=4)
    assert "W_y" in model.parameter_names
    x = np.array([0.1, -0.2, 0.3])
    neighbors = [np.array([1.0, 0.0, 0.5]), np.array([0.0, 2.0, -1.0])]
    scores = model.forward(x, neighbor_features=neighbors)
    assert scores.shape == (2,)
    assert np.array_equal(scores, model.forward(x, neighbor_features=neighbors[::-1]))
    model.save(str(tmp_path / "m.tnck"))
    back = tagnet.Model.load(str(tmp_path / "m.tnck"))
    assert np.max(np.abs(back.forward(x, neighbor_features=neighbors) - scores)) < 1e-6
    with pytest.raises(ValueError):
        model.forward(np.zeros(5), neighbor_features=neighbors)


def test_bad_architecture_is_a_value_error():
    with pytest.raises(ValueError):
        tagnet.grad_check("resnet")


def test_synthetic_protocol_runs():
    runs = tagnet.run_synthetic_protocol([{"arch": "vonly"}, {"arch": "ltn", "n": "w2v"}], n=300, splits=1,
                                         seed=2, hidden=16, max_epochs=2)
    assert [r["experiment"] for r in runs] == ["vonly n:id (3,6)", "ltn n:w2v (3,6)"]
    assert all(0.0 <= r["mAP_lab"] <= 100.0 for r in runs)
