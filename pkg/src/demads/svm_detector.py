"""Soft-margin SVM trained with simplified SMO, plus one-vs-one multiclass voting."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .feature_pipeline import DailySample, Standardizer, fit_standardizer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class SingleClassInput(ValueError):
    pass


class NonFiniteFeature(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    kind: str = "rbf"             # "linear" | "rbf"
    gamma: float | None = None    # rbf only; None -> 1 / feature_count at training time

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and self.gamma is not None and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("rbf gamma must be finite and positive")

    def resolved(self, n_features: int) -> "Kernel":
        if self.kind == "rbf" and self.gamma is None:
            return Kernel("rbf", 1.0 / n_features)
        return self

    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        if self.kind == "linear":
            return a @ b.T
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma}


LINEAR = Kernel("linear")


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # (m, d)
    dual_coef: np.ndarray        # alpha_i * y_i, (m,)
    bias: float
    kernel: Kernel
    positive_label: str = "+1"
    negative_label: str = "-1"
    C: float = 10.0
    tol: float = 1e-3

    @property
    def alphas(self) -> np.ndarray:
        return np.abs(self.dual_coef)

    def to_dict(self) -> dict:
        return {
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "bias": self.bias,
            "kernel": self.kernel.to_dict(),
            "positive_label": self.positive_label,
            "negative_label": self.negative_label,
            "C": self.C,
            "tol": self.tol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SvmModel":
        sv = np.array(data["support_vectors"], dtype=float)
        return cls(
            support_vectors=sv.reshape(len(data["dual_coef"]), -1),
            dual_coef=np.array(data["dual_coef"], dtype=float),
            bias=float(data["bias"]),
            kernel=Kernel(**data["kernel"]),
            positive_label=data["positive_label"],
            negative_label=data["negative_label"],
            C=float(data["C"]),
            tol=float(data["tol"]),
        )


def train_binary(
    x,
    y,
    kernel: Kernel = LINEAR,
    C: float = 10.0,
    tol: float = 1e-3,
    max_passes: int = 20,
    seed: int = 0,
    max_sweeps: int = 20000,
    labels: tuple[str, str] = ("+1", "-1"),
) -> SvmModel:
    """SMO with the second-choice heuristic.

    For each KKT violator the partner maximising |E_i - E_j| is tried first,
    then every other index in a seeded random order. Stops once ``max_passes``
    consecutive sweeps change no multiplier. The bias is finally recomputed as
    the mean over free support vectors.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ShapeMismatch("x and y lengths differ")
    if not np.all(np.isfinite(x)):
        raise NonFiniteFeature("non-finite feature value")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise SingleClassInput("both classes must be present")
    kernel = kernel.resolved(x.shape[1])
    n = len(y)
    K = kernel.gram(x, x)
    alpha = np.zeros(n)
    b = 0.0
    rng = np.random.default_rng(seed)

    def take_step(i, j, e_i):
        nonlocal b
        e_j = (alpha * y) @ K[:, j] + b - y[j]
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            lo, hi = max(0.0, aj_old - ai_old), min(C, C + aj_old - ai_old)
        else:
            lo, hi = max(0.0, ai_old + aj_old - C), min(C, ai_old + aj_old)
        if lo >= hi:
            return False
        eta = 2.0 * K[i, j] - K[i, i] - K[j, j]
        if eta >= 0:
            return False
        aj = min(hi, max(lo, aj_old - y[j] * (e_i - e_j) / eta))
        if abs(aj - aj_old) < 1e-10 * (1.0 + aj + aj_old):
            return False
        ai = ai_old + y[i] * y[j] * (aj_old - aj)
        # snap to the box so 0 <= alpha <= C holds exactly
        ai = min(C, max(0.0, ai))
        alpha[i], alpha[j] = ai, aj
        b1 = b - e_i - y[i] * (ai - ai_old) * K[i, i] - y[j] * (aj - aj_old) * K[i, j]
        b2 = b - e_j - y[i] * (ai - ai_old) * K[i, j] - y[j] * (aj - aj_old) * K[j, j]
        if 0 < ai < C:
            b = b1
        elif 0 < aj < C:
            b = b2
        else:
            b = 0.5 * (b1 + b2)
        return True

    passes = 0
    sweeps = 0
    while passes < max_passes and sweeps < max_sweeps:
        sweeps += 1
        changed = 0
        for i in range(n):
            e_i = (alpha * y) @ K[:, i] + b - y[i]
            if not ((y[i] * e_i < -tol and alpha[i] < C) or (y[i] * e_i > tol and alpha[i] > 0)):
                continue
            errors = K @ (alpha * y) + b - y
            gap = np.abs(errors - e_i)
            gap[i] = -1.0
            first = int(np.argmax(gap))
            if take_step(i, first, e_i):
                changed += 1
                continue
            for j in rng.permutation(n):
                if j != i and j != first and take_step(i, int(j), e_i):
                    changed += 1
                    break
        passes = passes + 1 if changed == 0 else 0
    if sweeps >= max_sweeps:
        log.warning("SMO stopped after %d sweeps without meeting the pass criterion", sweeps)

    free = (alpha > 1e-8) & (alpha < C - 1e-8)
    if free.any():
        f_nob = K[free] @ (alpha * y)
        b = float(np.mean(y[free] - f_nob))
    sv = alpha > 0
    return SvmModel(
        support_vectors=x[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=float(b),
        kernel=kernel,
        positive_label=labels[0],
        negative_label=labels[1],
        C=C,
        tol=tol,
    )


def decision_value(model: SvmModel, x) -> np.ndarray | float:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.support_vectors.shape[1]:
        raise ShapeMismatch(f"expected {model.support_vectors.shape[1]} features, got {arr.shape[1]}")
    f = model.kernel.gram(arr, model.support_vectors) @ model.dual_coef + model.bias
    return float(f[0]) if single else f


def predict(model: SvmModel, x):
    """+1 where f(x) > 0, else -1 (ties go to the negative class)."""
    f = decision_value(model, x)
    return np.where(np.asarray(f) > 0, 1, -1) if not np.isscalar(f) else (1 if f > 0 else -1)


@dataclass
class MultiClassSvm:
    labels: list[str]
    models: dict[tuple[str, str], SvmModel]
    standardizer: Standardizer | None = None
    kernel: Kernel = field(default_factory=Kernel)
    C: float = 10.0

    def prepare(self, x) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(x, dtype=float))
        return self.standardizer.apply(arr) if self.standardizer is not None else arr

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "labels": self.labels,
            "kernel": self.kernel.to_dict(),
            "C": self.C,
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "pairs": [
                {"positive": a, "negative": b, "model": m.to_dict()}
                for (a, b), m in self.models.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MultiClassSvm":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported SVM model format")
        std = data.get("standardizer")
        return cls(
            labels=list(data["labels"]),
            models={(p["positive"], p["negative"]): SvmModel.from_dict(p["model"]) for p in data["pairs"]},
            standardizer=None if std is None else Standardizer.from_dict(std),
            kernel=Kernel(**data["kernel"]),
            C=float(data["C"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MultiClassSvm":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_multiclass(
    samples: Sequence[DailySample],
    kernel: Kernel | None = None,
    C: float = 10.0,
    standardize: bool = True,
    tol: float = 1e-3,
    max_passes: int = 20,
    seed: int = 0,
) -> MultiClassSvm:
    """One binary SVM per unordered label pair; labels sorted lexicographically."""
    labels = sorted({s.label for s in samples})
    if len(labels) < 2:
        raise SingleClassInput("need at least two labels")
    std = fit_standardizer(samples) if standardize else None
    x = np.stack([s.features for s in samples])
    if std is not None:
        x = std.apply(x)
    kernel = (kernel or Kernel()).resolved(x.shape[1])
    y_all = np.array([s.label for s in samples])
    models = {}
    for a, b in itertools.combinations(labels, 2):
        mask = (y_all == a) | (y_all == b)
        y = np.where(y_all[mask] == a, 1.0, -1.0)
        models[(a, b)] = train_binary(x[mask], y, kernel, C, tol, max_passes, seed, labels=(a, b))
    return MultiClassSvm(labels, models, std, kernel, C)


def predict_multiclass(model: MultiClassSvm, x) -> str | list[str]:
    """Majority vote; ties go to the largest summed |f| of won duels, then lexicographic order."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    z = model.prepare(arr)
    votes = {lab: np.zeros(len(z)) for lab in model.labels}
    strength = {lab: np.zeros(len(z)) for lab in model.labels}
    for (a, b), m in model.models.items():
        f = np.atleast_1d(decision_value(m, z))
        win_a = f > 0
        votes[a] += win_a
        votes[b] += ~win_a
        strength[a] += np.where(win_a, np.abs(f), 0.0)
        strength[b] += np.where(~win_a, np.abs(f), 0.0)
    out = []
    for k in range(len(z)):
        top = max(votes[lab][k] for lab in model.labels)
        tied = [lab for lab in model.labels if votes[lab][k] == top]
        strongest = max(strength[lab][k] for lab in tied)
        out.append(min(lab for lab in tied if strength[lab][k] == strongest))
    return out[0] if single else out
