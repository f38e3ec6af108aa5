import itertools
import json

import numpy as np
import pytest

import mrdetr


def test_iou_and_nms():
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1]])
    ious = mrdetr.iou_pairwise(boxes, boxes)
    assert ious.shape == (3, 3)
    assert ious[0, 1] == pytest.approx(1.0)
    assert ious[0, 2] == 0.0
    assert mrdetr.nms(boxes, [0.9, 0.8, 0.7], 0.5) == [0, 2]
    xyxy = np.array([[0.0, 0.0, 1.0, 1.0]])
    assert mrdetr.giou_pairwise(xyxy, xyxy, form="xyxy")[0, 0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mrdetr.iou_pairwise(np.zeros((2, 3)), boxes)


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for n in range(1, 6):
        cost = rng.uniform(-1, 1, size=(n, n))
        gt_to_pred, total = mrdetr.hungarian_match(cost)
        best = min(sum(cost[p, g] for g, p in enumerate(perm)) for perm in itertools.permutations(range(n)))
        assert total == pytest.approx(best)
        assert sorted(gt_to_pred) == list(range(n))


def test_o2m_respects_threshold_and_quota():
    rng = np.random.default_rng(1)
    scores, ious = rng.uniform(size=(10, 3)), rng.uniform(size=(10, 3))
    pos = mrdetr.o2m_assign(scores, ious, alpha=0.3, k=2, tau=0.4)
    assert all(ious[i, j] >= 0.4 for i, j in pos)
    assert len({i for i, _ in pos}) == len(pos)
    assert all(sum(1 for _, j in pos if j == g) <= 2 for g in range(3))


def test_calibration_and_ap():
    assert mrdetr.calibrate_score(0.3, 0.7, 0.0) == 0.7
    assert mrdetr.calibrate_score(0.3, 0.7, 1.0) == 0.3
    box = [0.5, 0.5, 0.2, 0.2]
    r = mrdetr.compute_ap([(0, 0, 0.9, box)], [(0, 0, box)])
    assert r == {"AP": 1.0, "AP50": 1.0, "AP75": 1.0}
    assert mrdetr.compute_ap([], []) is None


def test_scene_and_model_detect():
    scene = mrdetr.generate_scene(3)
    assert scene["image"].shape == (64, 64, 3)
    assert len(scene["boxes"]) == len(scene["labels"]) >= 2
    assert scene["seed"] == 3
    m = mrdetr.Model("mrdetr", seed=0)
    assert m.routes == ["route-1", "route-2", "route-3"]
    assert m.num_params > 0
    dets = m.detect(scene["image"], top_n=5)
    assert len(dets) == 5
    assert all(0.0 <= d[2] <= 1.0 for d in dets)
    assert [d[2] for d in dets] == sorted((d[2] for d in dets), reverse=True)


def test_config_and_errors():
    cfg = mrdetr.resolve_config({"seed": 2}, {"preset": "o2o-only", "optim.epochs": 3})
    assert cfg["seed"] == 2 and cfg["preset"] == "o2o-only" and cfg["optim"]["epochs"] == 3
    assert "mrdetr-pp" in mrdetr.preset_names()
    with pytest.raises(ValueError):
        mrdetr.resolve_config(overrides=["preset=nope"])


def test_train_checkpoint_roundtrip(tmp_path):
    overrides = ["preset=mrdetr", "dataset.n_train=4", "dataset.n_val=2", "optim.epochs=1", "optim.batch=2"]
    r = mrdetr.train(overrides=overrides, run_dir=str(tmp_path / "run"))
    assert len(r["epoch_loss"]) == 1 and np.isfinite(r["epoch_loss"][0])
    for f in ("config.json", "metrics.csv", "checkpoint"):
        assert (tmp_path / "run" / f).exists()
    json.loads((tmp_path / "run" / "config.json").read_text())
    loaded = mrdetr.Model.load(str(tmp_path / "run" / "checkpoint"))
    assert mrdetr.evaluate(loaded, overrides=overrides) == mrdetr.evaluate(r["model"], overrides=overrides)


def test_gradcheck_small():
    rep = mrdetr.gradcheck("mrdetr", max_coords=2)
    assert rep["max_rel_error"] <= 1e-4
    assert rep["coords_checked"] > 0
