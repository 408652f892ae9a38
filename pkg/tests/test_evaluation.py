import csv
import io
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from domainshift_seg.core import BinaryMask, DataError, DomainLabel, ExperimentConfig, ImagePatch, Sample, Task, TaskDataset
from domainshift_seg.evaluation import (EnsembleMismatchError, ImageScore, MetricsReport, aggregate, dice, ensemble,
                                        evaluate, format_cell, predict, sigmoid_map, threshold)
from domainshift_seg.model import PRESETS, build_model

from conftest import make_sample
from oracles import dice_by_sets


class Stub(torch.nn.Module):
    """Logits computed by a fixed function of the input; no parameters."""

    def __init__(self, fn, tag="stub"):
        super().__init__()
        self.fn, self.tag = fn, tag

    def forward(self, x):
        return self.fn(x)

    def fingerprint(self):
        return self.tag


def constant(p, tag="stub"):
    logit = math.log(p / (1 - p))
    return Stub(lambda x: torch.full_like(x[:, :1], logit), tag)


ORACLE = Stub(lambda x: (x[:, :1] - 0.5) * 100)  # reads the mask back out of channel 0


def mask_encoded(sid, mask, domain="organ-1", seen=True):
    mask = np.asarray(mask, dtype=np.uint8)
    pixels = np.repeat(mask[..., None].astype(float), 3, axis=2)
    return Sample(ImagePatch(sid, pixels), BinaryMask(mask), DomainLabel(Task.CROSS_ORGAN, domain, seen))


# -- dice --------------------------------------------------------------------

def test_dice_examples():
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[1, 0, 0, 0]])
    assert dice(a, b) == pytest.approx(2 / 3, abs=1e-15)
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert dice(np.ones((3, 3)), np.zeros((3, 3))) == 0.0
    assert dice(a, a) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(DataError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_dice_against_set_oracle(data):
    shape = data.draw(st.tuples(st.integers(1, 9), st.integers(1, 9)))
    p = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    g = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    d = dice(p, g)
    assert 0.0 <= d <= 1.0
    assert d == dice(g, p)
    assert d == pytest.approx(dice_by_sets(p, g), abs=1e-15)


# -- probability maps ----------------------------------------------------------

def test_sigmoid_saturates_and_matches_reference():
    assert sigmoid_map(np.array([30.0]))[0] >= 1 - 1e-12
    assert np.isfinite(sigmoid_map(np.array([-1e4, 1e4]))).all()
    xs = np.linspace(-20, 20, 101)
    ref = np.array([1 / (1 + math.exp(-x)) for x in xs])
    np.testing.assert_allclose(sigmoid_map(xs), ref, rtol=0, atol=1e-12)


def test_threshold_is_inclusive():
    np.testing.assert_array_equal(threshold(np.array([0.49, 0.5, 0.51])), [0, 1, 1])
    assert threshold(np.array([0.7]), 0.8)[0] == 0


def test_ensemble_examples():
    np.testing.assert_allclose(ensemble([np.array([0.2, 0.8]), np.array([0.4, 0.6])]), [0.3, 0.7], atol=1e-15)
    single = np.array([[0.1, 0.9]])
    np.testing.assert_array_equal(ensemble([single]), single)
    with pytest.raises(DataError):
        ensemble([])
    with pytest.raises(DataError):
        ensemble([np.zeros(2), np.zeros(3)])


# -- predict -----------------------------------------------------------------

def test_predict_returns_native_size():
    model, _ = build_model(PRESETS["desk"], 0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    s = make_sample(size=(1500, 1500))
    cfg = ExperimentConfig(train_resolution=(64, 64), dtype="float64", model_preset="desk")
    prob = predict([model], s, cfg)
    assert prob.shape == (1500, 1500)
    assert np.all(prob == 0.5)


def test_single_model_equals_plain_pipeline():
    model, _ = build_model(PRESETS["micro"], 1)
    s = make_sample(size=(32, 32), seed=4)
    cfg = ExperimentConfig(train_resolution=(32, 32), dtype="float64", model_preset="micro")
    x = torch.from_numpy(s.patch.pixels.transpose(2, 0, 1).copy())[None]
    with torch.no_grad():
        direct = torch.sigmoid(model.eval()(x))[0, 0].numpy()
    np.testing.assert_allclose(predict([model], s, cfg), direct, rtol=0, atol=1e-12)


def test_mean_is_taken_before_threshold():
    s = make_sample(size=(8, 8))
    cfg = ExperimentConfig(train_resolution=(8, 8))
    models = [constant(0.9), constant(0.45), constant(0.45)]
    prob = predict(models, s, cfg)
    np.testing.assert_allclose(prob, 0.6, atol=1e-12)
    assert threshold(prob).all()                      # mean 0.6 is foreground
    votes = sum(threshold(predict([m], s, cfg)) for m in models)
    assert (votes < 2).all()                          # a per-model majority vote would say background


def test_predict_rejects_mixed_fingerprints():
    s = make_sample(size=(8, 8))
    with pytest.raises(EnsembleMismatchError):
        predict([constant(0.5, "a"), constant(0.5, "b")], s, ExperimentConfig(train_resolution=(8, 8)))


# -- aggregation and reports ---------------------------------------------------

def test_aggregate_examples():
    assert aggregate([0.0, 1.0]) == (0.5, pytest.approx(math.sqrt(0.5), abs=1e-15))
    assert aggregate([0.8]) == (0.8, 0.0)
    mean, std = aggregate([1.0, 0.5])
    assert format_cell(mean, std) == "75.00 ± 35.36"
    with pytest.raises(DataError):
        aggregate([])


def test_perfect_model_scores_one_hundred():
    rng = np.random.default_rng(0)
    samples = tuple(mask_encoded(f"p{i}", rng.uniform(size=(16, 16)) > 0.6) for i in range(4))
    report = evaluate([ORACLE], TaskDataset(Task.CROSS_ORGAN, samples), ExperimentConfig(train_resolution=(16, 16)))
    assert format_cell(*report.aggregate) == "100.00 ± 0.00"


def test_report_integrity():
    rng = np.random.default_rng(1)
    samples = tuple(mask_encoded(f"z{i}", rng.uniform(size=(8, 8)) > 0.5, domain=f"scanner-{i % 2 + 4}", seen=False)
                    for i in range(5))
    ds = TaskDataset(Task.CROSS_ORGAN, samples[::-1])
    report = evaluate([constant(0.7)], ds, ExperimentConfig(train_resolution=(8, 8)))
    assert [r.id for r in report.per_image] == sorted(ds.ids)
    assert len(report) == len(ds)
    for r in report.per_image:
        assert r.dice == pytest.approx(dice_by_sets(np.ones((8, 8)), ds.by_id()[r.id].mask.values), abs=1e-15)
    assert set(report.per_domain) == {"scanner-4", "scanner-5"}
    assert set(report.per_seen) == {"unseen"}


def test_evaluate_empty_dataset():
    with pytest.raises(DataError):
        evaluate([ORACLE], TaskDataset(Task.CROSS_ORGAN, ()), ExperimentConfig())


def test_report_roundtrip(tmp_path):
    rows = [ImageScore("b", "organ-2", True, 0.25), ImageScore("a", "organ-1", True, 1 / 3)]
    report = MetricsReport(rows)
    path = report.save(tmp_path / "r.json")
    back = MetricsReport.load(path)
    assert back.per_image == report.per_image
    assert back.to_json() == report.to_json()
    parsed = list(csv.DictReader(io.StringIO(path.with_suffix(".csv").read_text())))
    assert [r["id"] for r in parsed] == ["a", "b"]
    assert float(parsed[0]["dice"]) == 1 / 3


def test_report_rejects_duplicate_ids():
    with pytest.raises(DataError):
        MetricsReport([ImageScore("a", "d", True, 1.0)] * 2)
