"""Device-level misconfiguration detector on one bus's daily voltage curve.

Architecture (per block, residual connections around each sub-layer):

    windowed local RNN -> multi-head scaled dot-product attention -> ReLU feed-forward

followed by mean pooling over positions and a linear classification head.
The local RNN sees only the last ``window_w`` positions, which gives the model
its sense of order; attention is unmasked and spans the whole day.

Forward and backward passes are written out by hand in numpy.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import nn_core
from .der_control import ControlCurveVariant
from .grid_model import topology_fingerprint
from .nn_core import ShapeMismatch, check_finite, softmax
from .scenario_sim import MalfunctionSchedule, run_scenario

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CORRECT = ControlCurveVariant.CORRECT.value


class SingleClassInput(ValueError):
    pass


@dataclass(frozen=True)
class RtConfig:
    window_w: int = 8
    model_dim: int = 16
    heads: int = 2
    blocks: int = 1
    classes: int = 2
    sequence_len: int = 96

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 1 <= self.window_w <= self.sequence_len:
            raise ValueError("need 1 <= window_w <= sequence_len")
        if self.blocks < 1 or self.classes < 2:
            raise ValueError("need at least one block and two classes")


@dataclass
class LocalRnnLayer:
    w_in: np.ndarray   # (d, d_in)
    w_rec: np.ndarray  # (d, d)
    bias: np.ndarray   # (d,)

    def params(self) -> list[np.ndarray]:
        return [self.w_in, self.w_rec, self.bias]


@dataclass
class AttentionLayer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def params(self) -> list[np.ndarray]:
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class FeedForward:
    w1: np.ndarray  # (4d, d)
    b1: np.ndarray
    w2: np.ndarray  # (d, 4d)
    b2: np.ndarray

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class RtBlock:
    rnn: LocalRnnLayer
    attn: AttentionLayer
    ffn: FeedForward

    def params(self) -> list[np.ndarray]:
        return self.rnn.params() + self.attn.params() + self.ffn.params()


@dataclass
class RtModel:
    config: RtConfig
    embed_w: np.ndarray  # (d,)
    embed_b: np.ndarray  # (d,)
    blocks: list[RtBlock]
    head_w: np.ndarray   # (k, d)
    head_b: np.ndarray   # (k,)
    classes: list[str] = field(default_factory=lambda: [CORRECT, ControlCurveVariant.INVERTED.value])
    norm_mean: float = 0.0
    norm_std: float = 1.0

    @property
    def use_case(self) -> str:
        """The single malfunction class this model is trained to spot."""
        return self.classes[-1]

    def params(self) -> list[np.ndarray]:
        out = [self.embed_w, self.embed_b]
        for blk in self.blocks:
            out += blk.params()
        return out + [self.head_w, self.head_b]


@dataclass(frozen=True)
class MeterWindow:
    values: np.ndarray
    bus: int
    day: int
    label: str = CORRECT
    grid: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or not np.all(vals > 0):
            raise ValueError("meter window must be a 1-D series of positive voltages")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class DeviceFlag:
    bus: int
    use_case: str
    probability: float
    day: int

    def to_dict(self) -> dict:
        return {"day": self.day, "bus": self.bus, "use_case": self.use_case, "probability": self.probability}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceFlag":
        return cls(int(data["bus"]), str(data["use_case"]), float(data["probability"]), int(data["day"]))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_rt_model(config: RtConfig = RtConfig(), seed: int = 0, use_case: str = "Inverted") -> RtModel:
    if use_case == CORRECT:
        raise ValueError("use case must be a malfunction class")
    rng = np.random.default_rng(seed)
    d = config.model_dim
    blocks = []
    for _ in range(config.blocks):
        blocks.append(RtBlock(
            rnn=LocalRnnLayer(_uniform(rng, (d, d), d), _uniform(rng, (d, d), d), np.zeros(d)),
            attn=AttentionLayer(*(_uniform(rng, (d, d), d) for _ in range(4)), heads=config.heads),
            ffn=FeedForward(_uniform(rng, (4 * d, d), d), np.zeros(4 * d),
                            _uniform(rng, (d, 4 * d), 4 * d), np.zeros(d)),
        ))
    classes = [CORRECT, use_case]
    if config.classes != len(classes):
        raise ValueError("one model per use case: classes must be 2")
    return RtModel(
        config=config,
        embed_w=rng.uniform(-1.0, 1.0, d),
        embed_b=np.zeros(d),
        blocks=blocks,
        head_w=_uniform(rng, (config.classes, d), d),
        head_b=np.zeros(config.classes),
        classes=classes,
    )


# --- local RNN ----------------------------------------------------------------

def _rnn_forward(layer: LocalRnnLayer, x: np.ndarray, w: int):
    b, length, _ = x.shape
    d = layer.w_rec.shape[0]
    xp = np.concatenate([np.zeros((b, w - 1, x.shape[2])), x], axis=1)
    h = np.zeros((b, length, d))
    hs = [h]
    for s in range(w):
        h = np.tanh(xp[:, s:s + length] @ layer.w_in.T + h @ layer.w_rec.T + layer.bias)
        hs.append(h)
    return h, (xp, hs, w)


def _rnn_backward(layer: LocalRnnLayer, cache, dout: np.ndarray):
    xp, hs, w = cache
    length = dout.shape[1]
    d_in = xp.shape[2]
    d = layer.w_rec.shape[0]
    dxp = np.zeros_like(xp)
    dw_in = np.zeros_like(layer.w_in)
    dw_rec = np.zeros_like(layer.w_rec)
    dbias = np.zeros_like(layer.bias)
    dh = dout
    for s in range(w - 1, -1, -1):
        da = dh * (1.0 - hs[s + 1] ** 2)
        flat = da.reshape(-1, d)
        dw_in += flat.T @ xp[:, s:s + length].reshape(-1, d_in)
        dw_rec += flat.T @ hs[s].reshape(-1, d)
        dbias += flat.sum(axis=0)
        dxp[:, s:s + length] += da @ layer.w_in
        dh = da @ layer.w_rec
    return dxp[:, w - 1:], [dw_in, dw_rec, dbias]


def local_rnn_forward(layer: LocalRnnLayer, sequence: np.ndarray, window_w: int) -> np.ndarray:
    """Output at t is the final state of a tanh RNN run over positions t-w+1..t (zero-padded, zero start)."""
    x = np.asarray(sequence, dtype=float)
    single = x.ndim == 2
    x = x[None] if single else x
    if x.shape[2] != layer.w_in.shape[1]:
        raise ShapeMismatch(f"input dim {x.shape[2]} != {layer.w_in.shape[1]}")
    out, _ = _rnn_forward(layer, x, window_w)
    return out[0] if single else out


# --- attention ----------------------------------------------------------------

def _split(x: np.ndarray, heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def _attn_forward(layer: AttentionLayer, x: np.ndarray):
    d = x.shape[2]
    dh = d // layer.heads
    q = _split(x @ layer.wq.T, layer.heads)
    k = _split(x @ layer.wk.T, layer.heads)
    v = _split(x @ layer.wv.T, layer.heads)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    energy = softmax(scores, axis=-1)
    o = _merge(energy @ v)
    out = o @ layer.wo.T
    return out, (x, q, k, v, energy, o)


def _attn_backward(layer: AttentionLayer, cache, dout: np.ndarray):
    x, q, k, v, energy, o = cache
    d = x.shape[2]
    dh = d // layer.heads
    dwo = dout.reshape(-1, d).T @ o.reshape(-1, d)
    do = _split(dout @ layer.wo, layer.heads)
    de = do @ v.transpose(0, 1, 3, 2)
    dv = energy.transpose(0, 1, 3, 2) @ do
    ds = energy * (de - (de * energy).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    xf = x.reshape(-1, d)
    dwq = dq.reshape(-1, d).T @ xf
    dwk = dk.reshape(-1, d).T @ xf
    dwv = dv.reshape(-1, d).T @ xf
    dx = dq @ layer.wq + dk @ layer.wk + dv @ layer.wv
    return dx, [dwq, dwk, dwv, dwo]


def attention_energy(layer: AttentionLayer, states: np.ndarray) -> np.ndarray:
    """Softmax-normalised query/key scores, shape (heads, L, L) for a single sequence."""
    x = np.asarray(states, dtype=float)
    single = x.ndim == 2
    _, cache = _attn_forward(layer, x[None] if single else x)
    return cache[4][0] if single else cache[4]


def attention_forward(layer: AttentionLayer, states: np.ndarray) -> np.ndarray:
    """Unmasked multi-head attention over all positions."""
    x = np.asarray(states, dtype=float)
    single = x.ndim == 2
    x = x[None] if single else x
    if x.shape[2] % layer.heads or x.shape[2] != layer.wq.shape[1]:
        raise ShapeMismatch("state width does not match the attention layer")
    out, _ = _attn_forward(layer, x)
    return out[0] if single else out


# --- feed-forward -------------------------------------------------------------

def _ffn_forward(layer: FeedForward, x: np.ndarray):
    z = x @ layer.w1.T + layer.b1
    a = np.maximum(z, 0.0)
    return a @ layer.w2.T + layer.b2, (x, z, a)


def _ffn_backward(layer: FeedForward, cache, dout: np.ndarray):
    x, z, a = cache
    d = x.shape[2]
    hidden = a.shape[2]
    dw2 = dout.reshape(-1, d).T @ a.reshape(-1, hidden)
    db2 = dout.reshape(-1, d).sum(axis=0)
    dz = (dout @ layer.w2) * (z > 0)
    dw1 = dz.reshape(-1, hidden).T @ x.reshape(-1, d)
    db1 = dz.reshape(-1, hidden).sum(axis=0)
    return dz @ layer.w1, [dw1, db1, dw2, db2]


# --- whole model ----------------------------------------------------------------

def _normalize(model: RtModel, windows: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(windows, dtype=float))
    if x.shape[1] != model.config.sequence_len:
        raise ShapeMismatch(f"window length {x.shape[1]} != {model.config.sequence_len}")
    return (x - model.norm_mean) / model.norm_std


def _model_forward(model: RtModel, z: np.ndarray):
    h = z[:, :, None] * model.embed_w + model.embed_b
    caches = []
    for blk in model.blocks:
        r, c_rnn = _rnn_forward(blk.rnn, h, model.config.window_w)
        h1 = h + r
        a, c_attn = _attn_forward(blk.attn, h1)
        h2 = h1 + a
        f, c_ffn = _ffn_forward(blk.ffn, h2)
        h = h2 + f
        caches.append((c_rnn, c_attn, c_ffn))
    pooled = h.mean(axis=1)
    logits = pooled @ model.head_w.T + model.head_b
    return check_finite(logits, "rt forward"), (z, pooled, caches, h.shape[1])


def _model_backward(model: RtModel, cache, dlogits: np.ndarray) -> list[np.ndarray]:
    z, pooled, caches, length = cache
    dhead_w = dlogits.T @ pooled
    dhead_b = dlogits.sum(axis=0)
    dh = np.repeat((dlogits @ model.head_w)[:, None, :] / length, length, axis=1)
    block_grads = []
    for blk, (c_rnn, c_attn, c_ffn) in zip(reversed(model.blocks), reversed(caches)):
        dx, g_ffn = _ffn_backward(blk.ffn, c_ffn, dh)
        dh = dh + dx
        dx, g_attn = _attn_backward(blk.attn, c_attn, dh)
        dh = dh + dx
        dx, g_rnn = _rnn_backward(blk.rnn, c_rnn, dh)
        dh = dh + dx
        block_grads = g_rnn + g_attn + g_ffn + block_grads
    dembed_w = (dh * z[:, :, None]).sum(axis=(0, 1))
    dembed_b = dh.sum(axis=(0, 1))
    grads = [dembed_w, dembed_b] + block_grads + [dhead_w, dhead_b]
    for g in grads:
        check_finite(g, "rt backward")
    return grads


def logits(model: RtModel, windows) -> np.ndarray:
    return _model_forward(model, _normalize(model, windows))[0]


def loss_and_grads(model: RtModel, windows, targets) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and gradients in :meth:`RtModel.params` order."""
    out, cache = _model_forward(model, _normalize(model, windows))
    value, dlogits = nn_core.loss_and_output_grad(out, np.atleast_2d(targets), "cross_entropy")
    return value, _model_backward(model, cache, dlogits)


def relu_margin(model: RtModel, windows) -> float:
    """Smallest |pre-activation| over all feed-forward ReLUs; finite-difference checks need it well above eps."""
    _, cache = _model_forward(model, _normalize(model, windows))
    return float(min(np.min(np.abs(c_ffn[1])) for _, _, c_ffn in cache[2]))


def classify(model: RtModel, window) -> np.ndarray:
    """Class probabilities in ``model.classes`` order."""
    values = window.values if isinstance(window, MeterWindow) else np.asarray(window, dtype=float)
    single = values.ndim == 1
    probs = softmax(logits(model, values), axis=-1)
    return probs[0] if single else probs


def detect(model: RtModel, window: MeterWindow, threshold: float = 0.5) -> DeviceFlag | None:
    """Flag when the malfunction probability reaches ``threshold`` (closed boundary)."""
    prob = float(classify(model, window)[-1])
    if prob < threshold:
        return None
    return DeviceFlag(bus=window.bus, use_case=model.use_case, probability=prob, day=window.day)


def pretrain(
    model: RtModel,
    windows: Sequence[MeterWindow],
    config: nn_core.TrainConfig | None = None,
    min_grids: int = 3,
) -> tuple[RtModel, list[float]]:
    """Cross-entropy training on windows pooled from several grids (model updated in place)."""
    config = config or nn_core.TrainConfig(optimizer="adam", lr=3e-3, epochs=60, batch_size=32,
                                           loss="cross_entropy")
    labels = {w.label for w in windows}
    unknown = labels - set(model.classes)
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} are not classes of this model")
    if len(labels) < 2:
        raise SingleClassInput("training windows must contain both classes")
    grids = {w.grid for w in windows}
    if len(grids) < min_grids:
        raise ValueError(f"need windows from at least {min_grids} grids, got {len(grids)}")
    x = np.stack([w.values for w in windows])
    if x.shape[1] != model.config.sequence_len:
        raise ShapeMismatch("window length does not match the model")
    y = np.zeros((len(windows), len(model.classes)))
    for i, w in enumerate(windows):
        y[i, model.classes.index(w.label)] = 1.0
    model.norm_mean = float(x.mean())
    model.norm_std = float(x.std()) or 1.0

    def step(idx):
        return loss_and_grads(model, x[idx], y[idx])

    history = nn_core.run_training(
        model.params(), step, len(x), config,
        on_epoch=lambda e, v: log.debug("rt epoch %d loss %.4f", e, v),
    )
    return model, history


# --- datasets -------------------------------------------------------------------

def windows_from_measurements(ms, buses: Iterable[int], label: str, grid: str = "") -> list[MeterWindow]:
    """One window per (bus, day) from a measurement set's meter series."""
    out = []
    for bus in buses:
        for i, day in enumerate(ms.days):
            out.append(MeterWindow(ms.meters[bus][i], bus, day, label, grid))
    return out


def build_device_windows(config, use_case: str) -> list[MeterWindow]:
    """Windows at every PV bus: one correct run, plus one run per inverter with that inverter misconfigured."""
    grid = topology_fingerprint(config.topology)
    buses = [inv.bus for inv in config.inverters]
    clean = run_scenario(replace(config, schedule=None))
    out = windows_from_measurements(clean, buses, CORRECT, grid)
    for bus in buses:
        faulty = run_scenario(replace(config, schedule=MalfunctionSchedule(bus, use_case, 0)))
        out += windows_from_measurements(faulty, [bus], use_case, grid)
    return out


# --- persistence ----------------------------------------------------------------

def rt_to_dict(model: RtModel) -> dict:
    cfg = model.config
    return {
        "format_version": FORMAT_VERSION,
        "rt_config": {
            "window_w": cfg.window_w, "model_dim": cfg.model_dim, "heads": cfg.heads,
            "blocks": cfg.blocks, "classes": cfg.classes, "sequence_len": cfg.sequence_len,
        },
        "use_case": model.use_case,
        "classes": model.classes,
        "normalization": {"mean": model.norm_mean, "std": model.norm_std},
        "params": [{"shape": list(p.shape), "values": p.reshape(-1).tolist()} for p in model.params()],
    }


def rt_from_dict(data: dict) -> RtModel:
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported detector model format")
    cfg = RtConfig(**data["rt_config"])
    model = init_rt_model(cfg, seed=0, use_case=data["use_case"])
    stored = data["params"]
    targets = model.params()
    if len(stored) != len(targets):
        raise ShapeMismatch("parameter count does not match the configuration")
    for dst, src in zip(targets, stored):
        arr = np.array(src["values"], dtype=float).reshape(src["shape"])
        if arr.shape != dst.shape:
            raise ShapeMismatch(f"parameter shape {arr.shape} != {dst.shape}")
        dst[...] = arr
    model.classes = list(data["classes"])
    model.norm_mean = float(data["normalization"]["mean"])
    model.norm_std = float(data["normalization"]["std"])
    return model


def save_rt_model(model: RtModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(rt_to_dict(model), fh)


def load_rt_model(path) -> RtModel:
    with open(path) as fh:
        return rt_from_dict(json.load(fh))
