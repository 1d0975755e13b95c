"""Combining predictions from several models.

The prior-weighted rule quantizes the training targets into evenly spaced bins
(100 for angle, 30 for speed). Each member's prediction is weighted by the
training-prior mass of the bin it falls in, and the weights are normalized
across members. Predictions that land in rare regions of the target
distribution therefore count for less.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .series import PredictionSeries, check_aligned

ANGLE_BINS = 100
SPEED_BINS = 30


@dataclass(frozen=True)
class BinPrior:
    lo: float
    hi: float
    n_bins: int
    probs: tuple

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("hi must exceed lo")
        if len(self.probs) != self.n_bins:
            raise ValueError("probs length must equal n_bins")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n_bins": self.n_bins, "probs": list(self.probs)}

    @classmethod
    def from_json(cls, d: dict) -> "BinPrior":
        return cls(float(d["lo"]), float(d["hi"]), int(d["n_bins"]), tuple(float(p) for p in d["probs"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BinPrior":
        return cls.from_json(json.loads(Path(path).read_text()))


def bin_index(prior: BinPrior, v: float) -> int:
    k = math.floor((v - prior.lo) / prior.width)
    return int(min(max(k, 0), prior.n_bins - 1))


def _bin_indices(prior: BinPrior, values: np.ndarray) -> np.ndarray:
    k = np.floor((np.asarray(values, dtype=np.float64) - prior.lo) / prior.width)
    return np.clip(k, 0, prior.n_bins - 1).astype(np.int64)


def build_prior(train_values, n_bins: int) -> BinPrior:
    values = np.asarray(train_values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot build a prior from no values")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + max(np.finfo(float).eps, np.spacing(abs(lo)))
    prior = BinPrior(lo, hi, n_bins, tuple([0.0] * n_bins))
    counts = np.bincount(_bin_indices(prior, values), minlength=n_bins)
    probs = counts / counts.sum()
    return BinPrior(lo, hi, n_bins, tuple(float(p) for p in probs))


def prior_weighted_average(preds, prior: BinPrior) -> float:
    # sorting makes the floating-point sums independent of member order
    preds = np.sort(np.asarray(preds, dtype=np.float64).ravel())
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    if np.all(preds == preds[0]):
        return float(preds[0])
    w = np.asarray(prior.probs)[_bin_indices(prior, preds)]
    total = w.sum()
    if total == 0:
        return float(preds.mean())
    return float(np.clip((w * preds).sum() / total, preds.min(), preds.max()))


def _weighted_columns(members: np.ndarray, prior: BinPrior) -> np.ndarray:
    """Vectorized prior_weighted_average over columns of a (n_members, n) array."""
    members = np.sort(members, axis=0)
    w = np.asarray(prior.probs)[_bin_indices(prior, members)]
    total = w.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    out = np.where(total > 0, (w * members).sum(axis=0) / safe, members.mean(axis=0))
    same = np.all(members == members[0], axis=0)
    out = np.where(same, members[0], out)
    return np.clip(out, members.min(axis=0), members.max(axis=0))


def plain_average(series) -> PredictionSeries:
    series = list(series)
    check_aligned(series)
    return series[0].with_values(
        _mean_columns(np.stack([s.angle_deg for s in series])),
        _mean_columns(np.stack([s.speed_kmh for s in series])),
    )


def _mean_columns(members: np.ndarray) -> np.ndarray:
    # sorted sums are order-free; agreeing members come back bit-exact
    members = np.sort(members, axis=0)
    same = np.all(members == members[0], axis=0)
    return np.where(same, members[0], members.mean(axis=0))


def ensemble_series(series, angle_prior: BinPrior, speed_prior: BinPrior) -> PredictionSeries:
    series = list(series)
    check_aligned(series)
    if len(series) == 1:
        return series[0].with_values(series[0].angle_deg.copy(), series[0].speed_kmh.copy())
    angle = _weighted_columns(np.stack([s.angle_deg for s in series]), angle_prior)
    speed = _weighted_columns(np.stack([s.speed_kmh for s in series]), speed_prior)
    return series[0].with_values(angle, speed)
