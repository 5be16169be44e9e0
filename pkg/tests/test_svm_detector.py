import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demads.feature_pipeline import MEASURED, DailySample
from demads.svm_detector import (
    LINEAR,
    Kernel,
    MultiClassSvm,
    NonFiniteFeature,
    ShapeMismatch,
    SingleClassInput,
    SvmModel,
    decision_value,
    predict,
    predict_multiclass,
    train_binary,
    train_multiclass,
)

XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
XOR_Y = np.array([-1, 1, 1, -1], float)


def blobs(seed, centers, per=10, spread=0.3):
    rng = np.random.default_rng(seed)
    out = []
    for k, (label, c) in enumerate(centers.items()):
        for i in range(per):
            out.append(DailySample(rng.normal(c, spread), label, k * per + i, MEASURED))
    return out


# --- binary ---------------------------------------------------------------------

def test_one_dimensional_margin():
    # two points at +-1: the maximum-margin separator is f(x) = x
    m = train_binary(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), LINEAR, C=10.0)
    assert abs(decision_value(m, [0.0])) < 1e-6
    assert decision_value(m, [1.0]) == pytest.approx(1.0, abs=1e-3)
    assert decision_value(m, [-1.0]) == pytest.approx(-1.0, abs=1e-3)
    assert decision_value(m, [0.5]) == pytest.approx(0.5, abs=1e-3)


def test_xor_needs_rbf():
    m = train_binary(XOR_X, XOR_Y, Kernel("rbf", 1.0), C=10.0)
    assert np.array_equal(predict(m, XOR_X), XOR_Y)


def test_single_class_rejected():
    with pytest.raises(SingleClassInput):
        train_binary(XOR_X, np.ones(4))
    with pytest.raises(SingleClassInput):
        train_multiclass(blobs(0, {"Correct": [0, 0]}))


def test_bad_inputs():
    with pytest.raises(NonFiniteFeature):
        train_binary(np.array([[0.0], [np.nan]]), np.array([-1.0, 1.0]))
    with pytest.raises(ShapeMismatch):
        train_binary(XOR_X, XOR_Y[:3])
    m = train_binary(XOR_X, XOR_Y, Kernel("rbf", 1.0))
    with pytest.raises(ShapeMismatch):
        decision_value(m, np.zeros(3))


def test_ties_go_negative():
    m = SvmModel(np.zeros((1, 1)), np.zeros(1), 0.0, LINEAR)
    assert predict(m, [0.3]) == -1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), C=st.sampled_from([0.1, 1.0, 10.0]),
       kind=st.sampled_from(["linear", "rbf"]))
def test_dual_constraints(seed, C, kind):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(24, 3))
    y = np.where(x[:, 0] + 0.5 * rng.normal(size=24) > 0, 1.0, -1.0)
    if len(np.unique(y)) < 2:
        y[0] = -y[0]
    m = train_binary(x, y, Kernel(kind, 0.5 if kind == "rbf" else None), C=C, seed=seed)
    assert np.all(m.alphas >= -1e-8) and np.all(m.alphas <= C + 1e-8)
    assert abs(m.dual_coef.sum()) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), gamma=st.floats(0.01, 5.0))
def test_gram_properties(seed, gamma):
    x = np.random.default_rng(seed).normal(size=(8, 4))
    for k in (LINEAR, Kernel("rbf", gamma)):
        g = k.gram(x, x)
        assert np.allclose(g, g.T, atol=1e-12)
    g = Kernel("rbf", gamma).gram(x, x)
    assert np.all(g > 0) and np.all(g <= 1.0)
    assert np.allclose(np.diag(g), 1.0, atol=1e-12)


def test_mirrored_data_gives_odd_decision():
    rng = np.random.default_rng(4)
    pos = rng.normal([1.5, 0.5], 0.4, size=(10, 2))
    x = np.vstack([pos, -pos])
    y = np.r_[np.ones(10), -np.ones(10)]
    m = train_binary(x, y, LINEAR, C=1.0)
    probe = rng.normal(size=(20, 2))
    assert np.allclose(decision_value(m, probe), -decision_value(m, -probe), atol=1e-6)


def test_binary_training_is_deterministic():
    a = train_binary(XOR_X, XOR_Y, Kernel("rbf", 1.0), seed=3)
    b = train_binary(XOR_X, XOR_Y, Kernel("rbf", 1.0), seed=3)
    assert a.to_dict() == b.to_dict()


# --- multiclass -----------------------------------------------------------------

def test_two_labels_match_binary_machine():
    samples = blobs(1, {"Correct": [0, 0], "Wrong": [2, 2]})
    mc = train_multiclass(samples, Kernel("rbf", 0.5), standardize=False)
    x = np.stack([s.features for s in samples])
    y = np.array([1.0 if s.label == "Correct" else -1.0 for s in samples])
    single = train_binary(x, y, Kernel("rbf", 0.5), labels=("Correct", "Wrong"))
    probe = np.random.default_rng(2).normal(1, 1.5, size=(30, 2))
    expected = ["Correct" if v > 0 else "Wrong" for v in decision_value(single, probe)]
    assert predict_multiclass(mc, probe) == expected


def test_three_separated_blobs():
    samples = blobs(5, {"Correct": [0, 0], "Inverted": [4, 0], "Wrong": [0, 4]})
    mc = train_multiclass(samples)
    assert mc.labels == ["Correct", "Inverted", "Wrong"]
    assert len(mc.models) == 3
    x = np.stack([s.features for s in samples])
    assert predict_multiclass(mc, x) == [s.label for s in samples]
    assert predict_multiclass(mc, x[0]) == "Correct"


def test_model_file_round_trip(tmp_path):
    samples = blobs(6, {"Correct": [0, 0, 0], "Inverted": [3, 0, 1], "Wrong": [0, 3, -1]})
    mc = train_multiclass(samples)
    mc.save(tmp_path / "svm.json")
    again = MultiClassSvm.load(tmp_path / "svm.json")
    probe = np.random.default_rng(0).normal(1, 2, size=(40, 3))
    assert predict_multiclass(again, probe) == predict_multiclass(mc, probe)
    for key, m in mc.models.items():
        assert np.array_equal(decision_value(m, mc.prepare(probe)),
                              decision_value(again.models[key], again.prepare(probe)))
