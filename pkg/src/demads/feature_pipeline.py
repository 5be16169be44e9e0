"""Turn a day of substation channels into one feature vector, and standardize sets of them.

Per channel the vector holds, in this order: mean, population std, min, max,
25th/50th/75th percentile (linear interpolation), then 24 hourly means.
Channels follow the column order of the day matrix.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

STATS = ("mean", "std", "min", "max", "q25", "q50", "q75")
HOURS = 24
PER_CHANNEL = len(STATS) + HOURS
LABELS = ("Correct", "Wrong", "Inverted", "Abnormal")
MEASURED = "Measured"
SIMULATED = "Simulated"


class EmptyDay(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class DailySample:
    features: np.ndarray
    label: str
    day: int
    provenance: str = MEASURED

    def relabeled(self, label: str) -> "DailySample":
        return DailySample(self.features, label, self.day, self.provenance)


def feature_names(channel_names: Sequence[str]) -> list[str]:
    names = []
    for ch in channel_names:
        names += [f"{ch}.{s}" for s in STATS]
        names += [f"{ch}.h{h:02d}" for h in range(HOURS)]
    return names


def _hour_of_step(steps: int) -> np.ndarray:
    return (np.arange(steps) * HOURS) // steps


def condense_day(day_matrix, channel_names: Sequence[str] | None = None) -> np.ndarray:
    x = np.asarray(day_matrix, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise EmptyDay("need at least two timesteps")
    if channel_names is not None and len(channel_names) != x.shape[1]:
        raise ValueError("channel names do not match the day matrix")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("day matrix contains NaN or Inf")

    steps = x.shape[0]
    stats = np.stack([
        x.mean(axis=0),
        x.std(axis=0),
        x.min(axis=0),
        x.max(axis=0),
        *np.percentile(x, [25, 50, 75], axis=0),
    ])  # (7, channels)

    hour = _hour_of_step(steps)
    counts = np.bincount(hour, minlength=HOURS)
    sums = np.zeros((HOURS, x.shape[1]))
    np.add.at(sums, hour, x)
    hourly = np.empty_like(sums)
    filled = counts > 0
    hourly[filled] = sums[filled] / counts[filled, None]
    # coarse cadences leave hours without samples: use the sample covering that hour
    for h in np.where(~filled)[0]:
        hourly[h] = x[(h * steps) // HOURS]
    return np.concatenate([stats, hourly]).T.reshape(-1)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, vector) -> np.ndarray:
        return (np.asarray(vector, dtype=float) - self.mean) / self.std

    def inverse(self, vector) -> np.ndarray:
        return np.asarray(vector, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        return cls(np.array(data["mean"], dtype=float), np.array(data["std"], dtype=float))


def fit_standardizer_matrix(x: np.ndarray, min_std: float = 1e-12) -> Standardizer:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] < 2:
        raise TooFewSamples("need at least two samples to fit a standardizer")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # zero-variance guard: the feature maps to 0
    std = np.where(std > min_std * np.maximum(1.0, np.abs(mean)), std, 1.0)
    return Standardizer(mean, std)


def fit_standardizer(samples: Sequence[DailySample]) -> Standardizer:
    if len(samples) < 2:
        raise TooFewSamples("need at least two samples to fit a standardizer")
    return fit_standardizer_matrix(np.stack([s.features for s in samples]))


# --- dataset files ------------------------------------------------------------

def write_dataset(samples: Sequence[DailySample], path, channel_names: Sequence[str]) -> None:
    """CSV rows of (day, provenance, label, features...) plus a sidecar JSON."""
    path = Path(path)
    names = feature_names(channel_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "provenance", "label"] + names)
        for s in samples:
            w.writerow([s.day, s.provenance, s.label] + [repr(float(v)) for v in s.features])
    sidecar = {
        "channel_names": list(channel_names),
        "stats": list(STATS),
        "hours": HOURS,
        "features_per_channel": PER_CHANNEL,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_dataset(path) -> tuple[list[DailySample], list[str]]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            samples.append(DailySample(
                features=np.array([float(v) for v in row[3:]]),
                label=row[2],
                day=int(row[0]),
                provenance=row[1],
            ))
    return samples, sidecar["channel_names"]
