"""End-to-end smoke tests for the Python bindings."""

import json
import math

import numpy as np
import pytest

import flipshield as fs


def test_bit_helpers():
    assert fs.float_to_bits(1.0) == 0x3F800000
    assert fs.bits_to_float(0x3F800000) == 1.0
    assert math.isinf(fs.flip_bits(1.0, [30]))
    assert fs.flip_bits(fs.flip_bits(3.25, [23, 30]), [23, 30]) == 3.25
    with pytest.raises(fs.RangeError):
        fs.flip_bits(1.0, [32])


def test_restrict_value():
    assert fs.restrict_value(5.0, "clip-to-zero", 0.0, 2.0) == 0.0
    assert fs.restrict_value(1.5, "clip-to-zero", 0.0, 2.0) == 1.5
    assert fs.restrict_value(float("nan"), "clip-to-zero", 0.0, 2.0) == 0.0
    assert fs.restrict_value(5.0, "clamp-to-bounds", 0.0, 2.0) == 2.0
    assert fs.restrict_value(float("nan"), "clamp-to-bounds", 0.0, 2.0) == 0.0


def test_metrics():
    assert fs.iou([0, 0, 2, 2], [0, 0, 2, 2]) == pytest.approx(1.0)
    assert fs.iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0

    preds = [fs.Detection(0.0, 0.0, 1.0, 1.0, class_id=0, score=0.9)]
    gts = [fs.GtObject(0.0, 0.0, 1.0, 1.0, class_id=0)]
    out = fs.match_detections(preds, gts)
    assert (out.tp, out.fp, out.fn) == (1, 0, 0)

    golden = [fs.match_detections(preds, gts) for _ in range(10)]
    faulty = [(golden[i], i < 2) for i in range(10)]
    report = fs.ivmod(golden, faulty)
    assert report["sdc_rate"] == 0.0
    assert report["due_rate"] == pytest.approx(0.2)
    assert report["fd_rate"] == pytest.approx(0.2)

    value, no_gt = fs.ap50([preds], [gts])
    assert value == pytest.approx(1.0)
    assert not no_gt


def test_dataset_roundtrip():
    ds = fs.generate_dataset(json.dumps({"seed": 3, "n_images": 10}))
    assert len(ds["images"]) == 10
    assert ds["images"][0].shape == (3, 32, 32)
    assert len(ds["annotations"]) == 10
    assert set(ds["profiling_indices"]).isdisjoint(ds["eval_indices"])
    again = fs.generate_dataset(json.dumps({"seed": 3, "n_images": 10}))
    assert np.array_equal(ds["images"][4], again["images"][4])
    assert ds["content_hash"] == again["content_hash"]


def test_model_forward_deterministic():
    model = fs.Model.toy_detr(seed=7)
    assert model.arch == "toy-detr"
    layers = json.loads(model.layers_json())
    assert sum(1 for l in layers if l["kind"] == "attention-linear") == 16

    image = np.zeros((3, 32, 32), dtype=np.float32)
    a = model.forward(image)
    b = model.forward(image)
    assert len(a["detections"]) == 8
    for da, db in zip(a["detections"], b["detections"]):
        assert fs.float_to_bits(da.score) == fs.float_to_bits(db.score)
    assert len(a["trace"]) == len(layers)


def test_fault_and_mitigation(tmp_path):
    model = fs.Model.toy_detr(seed=7)
    ds = fs.generate_dataset(json.dumps({"seed": 3, "n_images": 10}))
    image = ds["images"][ds["eval_indices"][0]]

    plan = fs.sample_plan(model, target="neurons", num_bit_flips=1, seed=11)
    assert not plan.empty()
    assert len(plan.sites) == 1

    golden = fs.run_inference(model, image)
    faulty = fs.run_inference(model, image, plan=plan)
    assert faulty["record"] is not None
    record = json.loads(faulty["record"])
    assert record["layer_id"] == plan.layer_id

    profiling = [ds["images"][i] for i in ds["profiling_indices"]]
    bounds = fs.profile_bounds(model, profiling, "smoke")
    assert bounds.size() == len(json.loads(model.layers_json()))
    mitigated = fs.run_inference(model, image, policy="global-clipper", bounds=bounds, plan=plan)
    assert all(d.finite() for d in mitigated["detections"])

    # Transparency: when the bounds were profiled over a set containing the
    # image, a fault-free clipped run must not change the output.
    covering = fs.profile_bounds(model, profiling + [image], "smoke+eval")
    clean = fs.run_inference(model, image, policy="global-clipper", bounds=covering)
    for dg, dc in zip(golden["detections"], clean["detections"]):
        assert fs.float_to_bits(dg.score) == fs.float_to_bits(dc.score)

    path = str(tmp_path / "model.bin")
    model.save(path)
    loaded = fs.Model.load(path)
    assert loaded.content_hash() == model.content_hash()


def test_campaign_pipeline(tmp_path):
    config = {
        "dataset": {"seed": 3, "n_images": 10},
        "fault": {"seed": 5, "num_bit_flips": 1},
        "policy": "global-clipper",
        "injections": 8,
        "out_dir": str(tmp_path / "out"),
    }
    res = fs.run_campaign(json.dumps(config))
    assert res["n"] == 8
    assert 0.0 <= res["fd_rate"] <= 1.0
    bundle = json.loads(fs.report_bundle([res["csv_path"]]))
    assert bundle["per_policy"][0]["policy"] == "global-clipper"
    assert bundle["per_policy"][0]["n"] == 8

    with pytest.raises(fs.ParseError):
        fs.report_bundle([str(tmp_path / "missing.csv")])
