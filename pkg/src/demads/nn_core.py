"""Small dense-network toolkit: layers, losses, hand-written backprop, optimizers.

Everything is float64. Non-finite values raise immediately instead of
propagating through training.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("mse", "cross_entropy")


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value in {where}")
    return arr


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(f"weights {self.weights.shape} vs bias {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeMismatch(f"layer output {a.n_out} does not feed input {b.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out


def init_mlp(sizes: Sequence[int], activations: Sequence[str], seed: int = 0) -> Mlp:
    """Uniform fan-in initialisation: weights in +-sqrt(1/fan_in), zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ShapeMismatch("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = np.sqrt(1.0 / n_in)
        layers.append(DenseLayer(rng.uniform(-bound, bound, (n_out, n_in)), np.zeros(n_out), act))
    return Mlp(layers)


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``a`` is its output)."""
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(float)
    return np.ones_like(z)


def _as_batch(mlp: Mlp, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != mlp.n_in:
        raise ShapeMismatch(f"input width {arr.shape[1]} != {mlp.n_in}")
    return arr, single


def _forward_cache(mlp: Mlp, x: np.ndarray):
    acts = [x]
    pre = []
    for layer in mlp.layers:
        z = acts[-1] @ layer.weights.T + layer.bias
        pre.append(z)
        acts.append(check_finite(activate(z, layer.activation), "forward"))
    return pre, acts


def forward(mlp: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (batch, n_in) matrix."""
    arr, single = _as_batch(mlp, x)
    out = _forward_cache(mlp, arr)[1][-1]
    return out[0] if single else out


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ShapeMismatch("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def loss_and_output_grad(pred: np.ndarray, target: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient with respect to ``pred``.

    ``mse`` averages squared error over every element. ``cross_entropy``
    treats ``pred`` as logits and averages over the batch.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if loss == "mse":
        diff = pred - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if loss == "cross_entropy":
        n = pred.shape[0]
        logp = log_softmax(pred)
        value = float(-(target * logp).sum() / n)
        return value, (np.exp(logp) * target.sum(axis=1, keepdims=True) - target) / n
    raise ValueError(f"unknown loss {loss!r}")


def backward(mlp: Mlp, x, target, loss: str = "mse", scale: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Reverse-mode gradients of ``scale * loss`` in :meth:`Mlp.params` order."""
    arr, _ = _as_batch(mlp, x)
    tgt = np.atleast_2d(np.asarray(target, dtype=float))
    pre, acts = _forward_cache(mlp, arr)
    value, delta = loss_and_output_grad(acts[-1], tgt, loss)
    delta = delta * scale
    grads: list[np.ndarray] = []
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        delta = delta * activation_grad(pre[i], acts[i + 1], layer.activation)
        grads = [delta.T @ acts[i], delta.sum(axis=0)] + grads
        delta = delta @ layer.weights
    for g in grads:
        check_finite(g, "backward")
    return grads, value * scale


# --- optimisers -------------------------------------------------------------

class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    loss: str = "mse"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return Sgd(self.lr)
        return Adam(self.lr, self.beta1, self.beta2, self.eps)


def run_training(
    params: list[np.ndarray],
    loss_and_grads: Callable[[np.ndarray], tuple[float, list[np.ndarray]]],
    n_samples: int,
    config: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Minibatch loop shared by every model in the package.

    ``loss_and_grads(indices)`` returns the mean loss over those samples and
    matching gradients. Each epoch visits a fresh seeded permutation. Returns
    the per-epoch sample-weighted mean loss.
    """
    if n_samples < 1:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = config.make_optimizer()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = loss_and_grads(idx)
            if not np.isfinite(value):
                raise NonFiniteValue(f"loss diverged in epoch {epoch}")
            opt.step(params, grads)
            total += value * len(idx)
        for p in params:
            check_finite(p, "parameters after update")
        history.append(total / n_samples)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def train(mlp: Mlp, inputs, targets, config: TrainConfig) -> tuple[Mlp, list[float]]:
    """Train ``mlp`` in place; returns it with the loss history."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float)
    y = y.reshape(len(y), -1)
    if len(x) != len(y):
        raise ShapeMismatch("inputs and targets have different lengths")
    if x.shape[1] != mlp.n_in or y.shape[1] != mlp.n_out:
        raise ShapeMismatch("dataset does not match the network")

    def step(idx):
        grads, value = backward(mlp, x[idx], y[idx], config.loss)
        return value, grads

    history = run_training(mlp.params(), step, len(x), config)
    return mlp, history


# --- finite differences -----------------------------------------------------

def numerical_gradient(fn: Callable[[], float], params: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``fn`` w.r.t. each parameter entry (params perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn()
            flat[i] = orig - eps
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray], floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# --- persistence ------------------------------------------------------------

def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": [
            {
                "in": layer.n_in,
                "out": layer.n_out,
                "activation": layer.activation,
                "weights": layer.weights.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in mlp.layers
        ],
    }


def mlp_from_dict(data: dict) -> Mlp:
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {data.get('format_version')!r}")
    layers = []
    for spec in data["layers"]:
        w = np.array(spec["weights"], dtype=float).reshape(spec["out"], spec["in"])
        layers.append(DenseLayer(w, np.array(spec["bias"], dtype=float), spec["activation"]))
    return Mlp(layers)


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(mlp), fh)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))


def clone(mlp: Mlp) -> Mlp:
    return copy.deepcopy(mlp)
