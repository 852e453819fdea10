import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s2rm.errors import InputError
from s2rm.evalsuite import (DROP_FRACTIONS, GRID_CENTERS, METRIC_FIELDS, ConstantPredictor, CopyPreviousPredictor,
                            GroundTruthOracle, balanced_accuracy, balanced_accuracy_from_counts, confusion,
                            enclave_map, f1, grid_mask, one_step_eval, read_pgm, robustness_sweep, rollout,
                            stitch_grid, view_subset, write_pgm)
from s2rm.recurrent import S2RM, S2RMConfig
from s2rm.worldsim import DatasetSpec, extract_crops, generate_dataset, generate_episode, load_dataset

SMALL = dict(n_modules=2, hidden=6, embed_dim=8, input_heads=1, input_key=4, input_value=4, ic_heads=1,
             ic_key=4, ic_value=4, enc_width=8, codec_hidden=16, gate_hidden=4)


@pytest.fixture(scope="module")
def small_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    return {f"b{n}": load_dataset(generate_dataset(DatasetSpec(n_seq=3, T=4, A=5, n_balls=n, seed=n),
                                                   root / f"b{n}.bin")) for n in (2, 4)}


def brute_metrics(pred, target):
    tp = fp = tn = fn = 0
    for p, t in zip(pred, target):
        p = p >= 0.5
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    rec = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    terms = [x for x in (rec, spec) if x is not None]
    ba = sum(terms) / len(terms)
    prec = tp / (tp + fp) if tp + fp else 0.0
    r = rec or 0.0
    return ba, (2 * prec * r / (prec + r) if prec + r else 0.0)


def test_metric_examples():
    pred = np.array([1, 1, 0, 0, 1, 0, 0, 0])
    target = np.array([1, 0, 1, 0, 1, 0, 0, 0])
    # recall 2/3, specificity 4/5
    assert confusion(pred, target) == (2, 1, 4, 1)
    assert balanced_accuracy(pred, target) == pytest.approx((2 / 3 + 4 / 5) / 2)
    assert f1(pred, target) == pytest.approx(2 / 3)
    assert balanced_accuracy([1, 0, 0, 1], [1, 1, 0, 0]) == 0.5
    assert f1([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert balanced_accuracy([0.9, 0.2], [1, 0]) == 1.0 and f1([0.9, 0.2], [1, 0]) == 1.0


def test_no_predicted_positives_and_constant():
    target = np.array([1, 0, 0, 1, 0])
    assert f1(np.zeros(5), target) == 0.0
    assert balanced_accuracy(np.zeros(5), target) == 0.5
    assert balanced_accuracy(np.ones(5), target) == 0.5
    assert binarized_at_half()


def binarized_at_half():
    return confusion([0.5, 0.4999], [1, 1]) == (1, 0, 0, 1)


def test_absent_class_flag():
    ba, flagged = balanced_accuracy_from_counts(0, 1, 3, 0)
    assert flagged and ba == 0.75
    assert balanced_accuracy_from_counts(1, 0, 1, 0) == (1.0, False)
    assert math.isnan(balanced_accuracy_from_counts(0, 0, 0, 0)[0])
    with pytest.raises(ValueError):
        confusion([1, 0], [1])


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        target = rng.random(n) < rng.random()
        if target.all() or not target.any():
            target[0] = not target[0]
        pred = rng.random(n)
        ba, f = brute_metrics(pred, target)
        assert abs(balanced_accuracy(pred, target) - ba) < 1e-12
        assert abs(f1(pred, target) - f) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=2, max_size=60), st.booleans())
def test_constant_predictor_scores_half(target, value):
    target = np.array(target)
    if target.all() or not target.any():
        return
    assert balanced_accuracy(np.full(len(target), float(value)), target) == 0.5


def test_stitch_grid_geometry():
    assert GRID_CENTERS.shape == (16, 2)
    mask = grid_mask()
    assert mask.sum() == 16 * 121 == 1936
    img = stitch_grid(np.arange(16 * 121, dtype=float).reshape(16, 11, 11) % 7 + 1)
    assert np.count_nonzero(img) == 1936
    assert np.all(img[~mask] == 0)
    # windows span 1-11, 13-23, 25-35 and 37-47 along each axis
    for gap in (0, 12, 24, 36):
        assert not mask[gap].any() and not mask[:, gap].any()
    assert mask[47, 47] and mask[1, 1]


def test_view_subset():
    assert view_subset(10, 0.0, 1, 5, 3).tolist() == list(range(10))
    keep = view_subset(10, 0.4, 1, 5, 3)
    assert len(keep) == 6 and np.all(np.diff(keep) > 0)
    assert np.array_equal(keep, view_subset(10, 0.4, 1, 5, 3))
    assert len(view_subset(10, 1.0, 0, 0, 0)) == 0
    assert len(view_subset(10, 0.95, 0, 0, 0)) == 1


def test_reference_predictors(small_sets):
    ds = small_sets["b2"]
    zero = one_step_eval(ConstantPredictor(0.0), ds)
    assert zero.balanced_accuracy == 0.5 and zero.f1 == 0.0
    one = one_step_eval(ConstantPredictor(1.0), ds)
    assert one.balanced_accuracy == 0.5
    copy = one_step_eval(CopyPreviousPredictor(), ds)
    assert 0.5 <= copy.balanced_accuracy <= 1.0
    assert one_step_eval(CopyPreviousPredictor(), ds, 1.0).balanced_accuracy == 0.5


def test_one_step_eval_model(small_sets):
    model = S2RM(S2RMConfig(**SMALL))
    row = one_step_eval(model, small_sets["b4"], 0.2, seed=1, dataset_id="b4")
    assert row.dataset == "b4" and row.n_balls == 4 and row.drop_fraction == 0.2
    assert 0 <= row.balanced_accuracy <= 1 and row.mean_bce > 0
    assert sum(row.counts) == 3 * 3 * 5 * 121
    again = one_step_eval(model, small_sets["b4"], 0.2, seed=1, dataset_id="b4")
    assert again.counts == row.counts
    with pytest.raises(InputError):
        one_step_eval(model, small_sets["b4"], 1.5)


def test_robustness_sweep_csv(small_sets, tmp_path):
    fractions = (0.0, 0.5, 1.0)
    report = robustness_sweep(CopyPreviousPredictor(), small_sets, fractions, out_csv=tmp_path / "r.csv")
    assert len(report) == len(fractions) * len(small_sets)
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_FIELDS and len(rows) == 6
    assert [r["drop_fraction"] for r in rows[:3]] == ["0", "0.5", "1"]
    assert report.get("b4", 1.0).balanced_accuracy == 0.5
    assert DROP_FRACTIONS[-1] == 0.8 and len(DROP_FRACTIONS) == 9


def test_rollout_with_oracle_is_exact():
    ep = generate_episode(3, 45, 10, seed=5)
    res = rollout(GroundTruthOracle(ep.frames), ep, seed=2)
    assert res.predictions.shape == (45, 48, 48)
    assert [r["phase"] for r in res.records].count("prompt") == 20
    assert [r["phase"] for r in res.records].count("rollout") == 25
    assert np.array_equal(res.predictions >= 0.5, res.truth.astype(bool))
    for rec, frame in zip(res.records, ep.frames):
        assert np.array_equal(rec["crops"], extract_crops(frame, rec["centers"]))


def test_rollout_deterministic_and_length_check():
    model = S2RM(S2RMConfig(**SMALL))
    ep = generate_episode(2, 45, 4, seed=1)
    a, b = rollout(model, ep, seed=3, A=4), rollout(model, ep, seed=3, A=4)
    assert np.array_equal(a.predictions, b.predictions)
    assert all(np.array_equal(x["centers"], y["centers"]) for x, y in zip(a.records, b.records))
    with pytest.raises(InputError):
        rollout(model, generate_episode(2, 44, 4, seed=1))


def test_enclave_map():
    model = S2RM(S2RMConfig(**SMALL, tau=0.6))
    z = enclave_map(model)
    assert z.shape == (2, 48, 48)
    assert z.min() >= 0 and z.max() <= 1
    assert np.count_nonzero(z) < z.size  # truncation leaves pixels outside the enclaves
    with torch.no_grad():
        model.embeddings.P.copy_(model.embed(torch.tensor([[10.0, 20.0], [30.0, 40.0]])))
    z = enclave_map(model)
    assert z[0, 10, 20] == pytest.approx(1.0, abs=1e-6)
    assert z[1, 30, 40] == pytest.approx(1.0, abs=1e-6)


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 48 * 48).reshape(48, 48)
    path = write_pgm(img, tmp_path / "x.pgm")
    assert path.read_bytes().startswith(b"P5\n48 48\n255\n")
    assert np.allclose(read_pgm(path), img, atol=0.5 / 255 + 1e-12)
