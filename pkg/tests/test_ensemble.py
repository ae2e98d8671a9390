import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retinastack.ensemble import (
    EnsembleError,
    EnsembleMember,
    EnsembleSpec,
    OofBlock,
    StackedModel,
    assemble_features,
    bag_members,
    fit_stacker,
    mean_bag,
    stacked_values,
    member_id,
    merge_out_of_fold,
    oof_features,
    predict_stacked,
    stacker_cv_predictions,
    verify_out_of_fold,
)
from retinastack.lbfgs import LogisticModel
from retinastack.metrics import auroc
from retinastack.predictions import PredictionMatrix
from retinastack.sampling import FoldAssignment
from retinastack.synthetic import rfmid_inventory, synthetic_predictions


def _pm(mid, ids, classes, values):
    return PredictionMatrix(mid, ids, classes, np.asarray(values, dtype=float))


IDS = ("a", "b", "c")


def test_member_ids_and_grid():
    assert member_id("detector", "x") == "detector-x"
    assert member_id("classifier", "y", 3) == "classifier-y-f3"
    spec = EnsembleSpec.grid(["d1", "d2"], ["c1", "c2", "c3", "c4"], 5)
    assert len(spec.members) == 30
    assert spec.architectures("classifier") == ["c1", "c2", "c3", "c4"]
    assert [m.fold for m in spec.fold_members("detector", "d2")] == [0, 1, 2, 3, 4]
    assert spec.bagged().model_ids == ["detector-d1", "detector-d2", "classifier-c1",
                                       "classifier-c2", "classifier-c3", "classifier-c4"]
    assert EnsembleSpec.from_dict(spec.to_dict()) == spec


def test_spec_rejects_duplicates_and_bad_type():
    m = EnsembleMember("x", "detector", "a", 0)
    with pytest.raises(EnsembleError, match="duplicate"):
        EnsembleSpec((m, m))
    with pytest.raises(EnsembleError):
        EnsembleMember("y", "segmenter", "a")


def test_rfmid_inventory_shape():
    spec, preds, truth = rfmid_inventory(300, 1)
    X, names = assemble_features(preds, truth.sample_ids, spec)
    assert X.shape == (300, 570)
    assert names[0] == "detector-det_a-f0/Disease_Risk"
    assert sum(len(p.class_names) for p in preds) == 570
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = fit_stacker(X, names, truth.to_array(), truth.schema.class_names, members=spec)
    assert len(s.models) == 29 and s.classes == list(truth.schema.class_names)


def test_single_member_features_are_its_probabilities():
    p = _pm("m", IDS, ["k"], [[0.1], [0.7], [0.4]])
    X, names = assemble_features([p], ["c", "a"])
    assert names == ["m/k"] and np.array_equal(X[:, 0], [0.4, 0.1])


def test_spec_order_overrides_input_order(rng):
    p1 = _pm("m1", IDS, ["k"], rng.random((3, 1)))
    p2 = _pm("m2", IDS, ["k", "j"], rng.random((3, 2)))
    spec = EnsembleSpec((EnsembleMember("m1", "detector", "a"), EnsembleMember("m2", "classifier", "a")))
    a, na = assemble_features([p1, p2], IDS, spec)
    b, nb = assemble_features([p2, p1], IDS, spec)
    assert np.array_equal(a, b) and na == nb == ["m1/k", "m2/k", "m2/j"]


def test_assemble_errors(rng):
    p1 = _pm("m1", IDS, ["k"], rng.random((3, 1)))
    with pytest.raises(EnsembleError, match="duplicate"):
        assemble_features([p1, p1], IDS)
    with pytest.raises(EnsembleError):
        assemble_features([p1], ["a", "zzz"])
    spec = EnsembleSpec((EnsembleMember("m9", "detector", "a"),))
    with pytest.raises(EnsembleError, match="missing"):
        assemble_features([p1], IDS, spec)


def test_logit_features():
    p = _pm("m", IDS, ["k"], [[0.5], [0.75], [0.25]])
    X, _ = assemble_features([p], IDS, logit=True)
    assert np.allclose(X[:, 0], [0.0, np.log(3), -np.log(3)])


def test_mean_bag(rng):
    single = _pm("m", IDS, ["k"], rng.random((3, 1)))
    assert np.array_equal(mean_bag([single]).values, single.values)
    lo = _pm("lo", ("a",), ["k"], [[0.2]])
    hi = _pm("hi", ("a",), ["k"], [[0.8]])
    assert mean_bag([lo, hi]).values[0, 0] == pytest.approx(0.5, abs=1e-15)
    vals = rng.random((5, 3, 2))
    members = [_pm(f"m{i}", IDS, ["k", "j"], vals[i]) for i in range(5)]
    hand = sum(vals[i] for i in range(5)) / 5
    assert np.max(np.abs(mean_bag(members).values - hand)) < 1e-12
    with pytest.raises(EnsembleError, match="schema"):
        mean_bag([single, _pm("x", IDS, ["q"], rng.random((3, 1)))])


def test_identity_column_stacker(rng):
    n = 300
    y = (rng.random(n) < 0.3).astype(int)
    X = np.column_stack([y.astype(float), rng.random((n, 3))])
    s = fit_stacker(X, ["m/a", "m/b", "m/c", "m/d"], y, ["a"])
    model = s.models["a"]
    assert np.argmax(np.abs(model.coefficients)) == 0 and model.coefficients[0] > 0
    preds = [_pm("m", [f"s{i}" for i in range(n)], ["a", "b", "c", "d"], X)]
    out = predict_stacked(s, preds)
    assert auroc(out.values[:, 0], y) == 1.0
    # output is monotone in the copied column on fresh rows
    test = np.column_stack([np.linspace(0, 1, 20), np.full((20, 3), 0.5)])
    tp = predict_stacked(s, [_pm("m", [f"t{i}" for i in range(20)], ["a", "b", "c", "d"], test)])
    assert np.all(np.diff(tp.values[:, 0]) > 0)


def test_random_features_near_chance(rng):
    n = 1000
    X = rng.random((n, 6))
    y = (rng.random(n) < 0.4).astype(int)
    s = fit_stacker(X[:500], [f"m/{i}" for i in range(6)], y[:500], ["a"])
    p = StackedModel.from_json(s.to_json())
    assert abs(auroc(stacked_values(p, X[500:])[:, 0], y[500:]) - 0.5) < 0.1


def test_half_inputs_give_sigmoid_of_bias(rng):
    n = 200
    X = rng.random((n, 2))
    Y = np.column_stack([X[:, 0] > 0.5, X[:, 1] > 0.3]).astype(int)
    s = fit_stacker(X, ["m/a", "m/b"], Y, ["a", "b"])
    half = _pm("m", ("u", "v"), ["a", "b"], np.full((2, 2), 0.5))
    out = predict_stacked(s, [half])
    for j, c in enumerate(["a", "b"]):
        m = s.models[c]
        expected = 1 / (1 + np.exp(-(m.intercept + 0.5 * m.coefficients.sum())))
        assert np.allclose(out.values[:, j], expected, rtol=0, atol=1e-15)
    zero = StackedModel(["a"], ["m/a"], {"a": LogisticModel(np.zeros(1), 0.3, 0.0, ["m/a"])})
    one = _pm("m", ("u",), ["a"], [[0.5]])
    assert predict_stacked(zero, [one]).values[0, 0] == pytest.approx(1 / (1 + np.exp(-0.3)))


def test_row_permutation(rng):
    n = 60
    X = rng.random((n, 2))
    y = (X[:, 0] + 0.2 * rng.random(n) > 0.6).astype(int)
    s = fit_stacker(X, ["m/a", "m/b"], y, ["a"])
    ids = [f"s{i}" for i in range(n)]
    p = _pm("m", ids, ["a", "b"], X)
    perm = rng.permutation(n)
    out = predict_stacked(s, [p])
    out_perm = predict_stacked(s, [p], [ids[i] for i in perm])
    assert np.array_equal(out_perm.values, out.values[perm])


def test_member_mismatch_is_error(rng):
    X = rng.random((40, 2))
    y = (X[:, 0] > 0.5).astype(int)
    s = fit_stacker(X, ["m/a", "m/b"], y, ["a"])
    ids = [f"s{i}" for i in range(40)]
    with pytest.raises(EnsembleError, match="missing"):
        predict_stacked(s, [_pm("other", ids, ["a", "b"], X)])
    with pytest.raises(EnsembleError, match="differ"):
        predict_stacked(s, [_pm("m", ids, ["a", "c"], X)])


def test_zero_positive_class_falls_back(rng):
    X = rng.random((30, 2))
    with pytest.warns(UserWarning, match="stacker class 'z'"):
        s = fit_stacker(X, ["m/a", "m/b"], np.zeros((30, 1), int), ["z"])
    assert s.degenerate_classes == ["z"]


def test_stacked_probabilities_in_unit_interval(rng):
    X = rng.random((50, 3)) * 1e3
    y = (X[:, 0] > 500).astype(int)
    s = fit_stacker(X / 1e3, ["m/a", "m/b", "m/c"], y, ["a"])
    big = _pm("m", [f"s{i}" for i in range(3)], ["a", "b", "c"], [[1, 1, 1], [0, 0, 0], [1, 0, 1]])
    v = predict_stacked(s, [big]).values
    assert np.all((v >= 0) & (v <= 1))


# -- out-of-fold ------------------------------------------------------------------

def _fold_setup(rng, n=50, k=5):
    ids = [f"s{i:02d}" for i in range(n)]
    folds = FoldAssignment(k, ids, [i % k for i in range(n)])
    spec = EnsembleSpec.grid(["d"], ["c"], k)
    preds = {}
    for m in spec.members:
        classes = ["R"] if m.model_type == "detector" else ["A", "B"]
        # mark the producing fold in the values so provenance can be checked
        v = np.full((n, len(classes)), (m.fold + 1) / 10.0)
        preds[m.model_id] = _pm(m.model_id, ids, classes, v)
    return ids, folds, spec, preds


def test_oof_rows_come_from_holdout_member(rng):
    ids, folds, spec, preds = _fold_setup(rng)
    X, names, bagged = oof_features(preds, spec, folds)
    assert names == ["detector-d/R", "classifier-c/A", "classifier-c/B"]
    assert bagged.model_ids == ["detector-d", "classifier-c"]
    fold_of = folds.fold_of
    for i, sid in enumerate(ids):
        assert np.all(X[i] == (fold_of[sid] + 1) / 10.0)
    block = merge_out_of_fold(preds, spec, "classifier", "c", folds)
    for sid, mid in block.source.items():
        assert spec.get(mid).fold == fold_of[sid]


def test_leak_detection(rng):
    ids, folds, spec, preds = _fold_setup(rng)
    block = merge_out_of_fold(preds, spec, "detector", "d", folds)
    source = dict(block.source)
    source[ids[0]] = "detector-d-f4" if folds.fold_of[ids[0]] != 4 else "detector-d-f0"
    with pytest.raises(EnsembleError, match="leak"):
        verify_out_of_fold([OofBlock(block.preds, source)], spec, folds)


def test_oof_missing_fold_member(rng):
    ids, folds, spec, preds = _fold_setup(rng)
    del preds["classifier-c-f2"]
    with pytest.raises(EnsembleError, match="missing"):
        oof_features(preds, spec, folds)


def test_bag_members(rng):
    ids, folds, spec, preds = _fold_setup(rng)
    bags = bag_members(preds, spec)
    assert [b.model_id for b in bags] == ["detector-d", "classifier-c"]
    assert np.allclose(bags[0].values, 0.3)


def test_cross_class_context(rng):
    # truth of class A is member 1's class-B column thresholded
    n = 600
    y_b = (rng.random(n) < 0.4).astype(int)
    y_other = (rng.random(n) < 0.4).astype(int)
    m1 = np.column_stack([synthetic_predictions(y_other, 0.2, rng), synthetic_predictions(y_b, 2.0, rng)])
    m2 = np.column_stack([synthetic_predictions(y_other, 0.2, rng), rng.random(n)])
    y_a = (m1[:, 1] > 0.5).astype(int)
    ids = [f"s{i}" for i in range(n)]
    preds = [_pm("m1", ids, ["A", "B"], m1), _pm("m2", ids, ["A", "B"], m2)]
    X, names = assemble_features(preds, ids)
    held = stacker_cv_predictions(X, names, y_a, ["A"], np.arange(n) % 5)
    stacked = auroc(held[:, 0], y_a)
    assert stacked > auroc(m1[:, 0], y_a) and stacked > auroc(m2[:, 0], y_a)


@given(st.integers(1, 6), st.lists(st.integers(1, 5), min_size=1, max_size=5))
def test_column_count_is_sum_of_classes(n, widths):
    ids = [f"s{i}" for i in range(n)]
    preds = [_pm(f"m{i}", ids, [f"c{j}" for j in range(w)], np.full((n, w), 0.5))
             for i, w in enumerate(widths)]
    X, names = assemble_features(preds, ids)
    assert X.shape == (n, sum(widths)) and len(set(names)) == sum(widths)


def test_stacked_model_json_roundtrip(rng):
    X = rng.random((40, 2))
    y = (X[:, 0] > 0.5).astype(int)
    spec = EnsembleSpec((EnsembleMember("m", "detector", "a"),))
    s = fit_stacker(X, ["m/a", "m/b"], y, ["a"], members=spec, logit=False, mode="oof")
    back = StackedModel.from_json(s.to_json())
    assert back.members == spec and back.feature_names == s.feature_names
    assert np.array_equal(back.models["a"].coefficients, s.models["a"].coefficients)
