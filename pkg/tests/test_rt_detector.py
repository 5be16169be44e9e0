import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demads import nn_core
from demads.presets import reference_scenario
from demads.rt_detector import (
    AttentionLayer,
    LocalRnnLayer,
    MeterWindow,
    RtConfig,
    ShapeMismatch,
    SingleClassInput,
    attention_energy,
    attention_forward,
    build_device_windows,
    classify,
    detect,
    init_rt_model,
    load_rt_model,
    local_rnn_forward,
    loss_and_grads,
    pretrain,
    relu_margin,
    save_rt_model,
)

SMALL = RtConfig(window_w=3, model_dim=4, heads=2, blocks=1, sequence_len=6)


def rnn(d=4, seed=0, bias=True):
    rng = np.random.default_rng(seed)
    return LocalRnnLayer(rng.normal(0, 0.5, (d, d)), rng.normal(0, 0.5, (d, d)),
                         rng.normal(0, 0.1, d) if bias else np.zeros(d))


def attn(d=4, heads=2, seed=0):
    rng = np.random.default_rng(seed)
    return AttentionLayer(*(rng.normal(0, 0.5, (d, d)) for _ in range(4)), heads=heads)


def voltages(rng, n, length):
    return 1.0 + 0.02 * rng.normal(size=(n, length))


def rt_grad_error(seed, cfg=SMALL):
    rng = np.random.default_rng(seed)
    model = init_rt_model(cfg, seed=seed)
    model.norm_mean, model.norm_std = 1.0, 0.02
    x = voltages(rng, 3, cfg.sequence_len)
    while relu_margin(model, x) < 1e-3:
        x = voltages(rng, 3, cfg.sequence_len)
    y = np.eye(2)[rng.integers(0, 2, 3)]
    grads = loss_and_grads(model, x, y)[1]
    numeric = nn_core.numerical_gradient(lambda: loss_and_grads(model, x, y)[0], model.params(), eps=1e-5)
    return nn_core.max_relative_error(grads, numeric, floor=1e-6)


# --- local RNN ------------------------------------------------------------------

def test_zero_input_zero_output():
    out = local_rnn_forward(rnn(bias=False), np.zeros((10, 4)), 3)
    assert np.array_equal(out, np.zeros((10, 4)))


@pytest.mark.parametrize("w", [1, 2, 4])
def test_perturbation_reaches_exactly_the_window(w):
    layer = rnn(seed=w)
    x = np.random.default_rng(1).normal(size=(12, 4))
    base = local_rnn_forward(layer, x, w)
    t = 5
    bumped = x.copy()
    bumped[t] += 0.3
    changed = np.any(local_rnn_forward(layer, bumped, w) != base, axis=1)
    assert np.flatnonzero(changed).tolist() == list(range(t, t + w))


def test_window_one_is_a_pointwise_map():
    layer = rnn(seed=3)
    x = np.random.default_rng(2).normal(size=(7, 4))
    expected = np.tanh(x @ layer.w_in.T + layer.bias)
    assert np.allclose(local_rnn_forward(layer, x, 1), expected, atol=1e-15)


def test_rnn_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        local_rnn_forward(rnn(), np.zeros((5, 3)), 2)


# --- attention ------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), length=st.integers(1, 20))
def test_energy_rows_sum_to_one(seed, length):
    states = np.random.default_rng(seed).normal(0, 3, size=(length, 4))
    energy = attention_energy(attn(seed=seed), states)
    assert energy.shape == (2, length, length)
    assert np.max(np.abs(energy.sum(axis=-1) - 1)) <= 1e-12


def test_single_position():
    layer = attn(seed=5)
    s = np.random.default_rng(0).normal(size=(1, 4))
    assert np.array_equal(attention_energy(layer, s), np.ones((2, 1, 1)))
    assert np.allclose(attention_forward(layer, s)[0], layer.wo @ (layer.wv @ s[0]), atol=1e-14)


def test_identical_states_give_identical_outputs():
    s = np.tile(np.random.default_rng(3).normal(size=4), (9, 1))
    out = attention_forward(attn(seed=2), s)
    assert np.allclose(out, out[0], atol=1e-14)


def test_attention_width_mismatch():
    with pytest.raises(ShapeMismatch):
        attention_forward(attn(), np.zeros((3, 6)))


# --- whole model ----------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fresh_model_probabilities(seed):
    model = init_rt_model(seed=seed)
    p = classify(model, voltages(np.random.default_rng(seed), 1, 96)[0])
    assert p.shape == (2,)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all((p > 0) & (p < 1))


def test_order_matters():
    model = init_rt_model(seed=1)
    model.norm_mean, model.norm_std = 1.0, 0.02
    x = voltages(np.random.default_rng(4), 1, 96)[0]
    perm = np.random.default_rng(5).permutation(96)
    assert not np.allclose(classify(model, x), classify(model, x[perm]), atol=1e-9)


def test_window_length_checked():
    with pytest.raises(ShapeMismatch):
        classify(init_rt_model(), np.ones(50))


@pytest.mark.parametrize("seed", range(5))
def test_whole_model_gradient(seed):
    assert rt_grad_error(seed) < 1e-4


def test_gradient_with_two_blocks():
    cfg = RtConfig(window_w=2, model_dim=4, heads=1, blocks=2, sequence_len=5)
    assert rt_grad_error(7, cfg) < 1e-4


def test_duplicated_batch_has_the_same_gradient():
    model = init_rt_model(SMALL, seed=2)
    rng = np.random.default_rng(0)
    x, y = voltages(rng, 4, 6), np.eye(2)[[0, 1, 1, 0]]
    g1 = loss_and_grads(model, x, y)[1]
    g2 = loss_and_grads(model, np.vstack([x, x]), np.vstack([y, y]))[1]
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


# --- detection ------------------------------------------------------------------

def constant_model(p_malfunction):
    model = init_rt_model(SMALL, seed=0)
    model.head_w[:] = 0
    model.head_b[:] = [0.0, np.log(p_malfunction / (1 - p_malfunction))]
    return model


def test_threshold_is_a_closed_boundary():
    window = MeterWindow(np.ones(6), bus=3, day=11)
    assert detect(constant_model(0.49), window) is None
    flag = detect(constant_model(0.5), window)
    assert flag is not None and flag.probability == 0.5
    assert (flag.bus, flag.day, flag.use_case) == (3, 11, "Inverted")


def test_flag_carries_no_voltages():
    flag = detect(constant_model(0.9), MeterWindow(np.full(6, 1.01), bus=2, day=4))
    assert set(json.loads(flag.to_json())) == {"day", "bus", "use_case", "probability"}


def test_windows_must_be_positive():
    with pytest.raises(ValueError):
        MeterWindow(np.zeros(6), 1, 0)


# --- training and persistence ---------------------------------------------------

def toy_windows(grids=("g0", "g1", "g2"), labels=("Correct", "Inverted")):
    rng = np.random.default_rng(0)
    out = []
    for g in grids:
        for k in range(6):
            lab = labels[k % len(labels)]
            shift = 0.01 if lab == "Inverted" else -0.01
            out.append(MeterWindow(1.0 + shift + 0.002 * rng.normal(size=6), 1, k, lab, g))
    return out


def test_pretrain_preconditions():
    model = init_rt_model(SMALL)
    with pytest.raises(SingleClassInput):
        pretrain(model, toy_windows(labels=("Correct",)))
    with pytest.raises(ValueError):
        pretrain(model, toy_windows(grids=("g0", "g1")))
    with pytest.raises(ValueError):
        pretrain(model, toy_windows(labels=("Correct", "Wrong")))


def test_pretrain_on_reference_grids(inverted_detector):
    model, history = inverted_detector
    assert history[-1] < history[0]
    assert model.use_case == "Inverted" and model.classes == ["Correct", "Inverted"]


def test_one_use_case_per_model():
    with pytest.raises(ValueError):
        init_rt_model(use_case="Correct")
    with pytest.raises(ValueError):
        init_rt_model(RtConfig(classes=3))


def test_model_file_round_trip(tmp_path, inverted_detector):
    model, _ = inverted_detector
    path = tmp_path / "rt.json"
    save_rt_model(model, path)
    data = json.loads(path.read_text())
    # weights and normalisation only: nothing scales with the training set
    n_params = sum(p.size for p in model.params())
    assert set(data) == {"format_version", "rt_config", "use_case", "classes", "normalization", "params"}
    assert sum(len(p["values"]) for p in data["params"]) == n_params
    again = load_rt_model(path)
    probe = voltages(np.random.default_rng(1), 5, 96)
    assert np.max(np.abs(classify(again, probe) - classify(model, probe))) <= 1e-12


def test_device_windows_cover_every_pv_bus():
    cfg = reference_scenario("D2", 2, seed=1)
    windows = build_device_windows(cfg, "Wrong")
    buses = sorted(inv.bus for inv in cfg.inverters)
    correct = [w for w in windows if w.label == "Correct"]
    wrong = [w for w in windows if w.label == "Wrong"]
    assert sorted({w.bus for w in correct}) == buses and len(correct) == 2 * len(buses)
    assert sorted({w.bus for w in wrong}) == buses and len(wrong) == 2 * len(buses)
    assert len({w.grid for w in windows}) == 1
