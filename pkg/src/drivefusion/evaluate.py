"""Challenge metrics: raw-unit MSE overall and per zone tag, plus the |angle| histogram."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset.records import ZONE_VOCABULARY


@dataclass
class ZoneScore:
    mse_angle: float
    mse_speed: float
    count: int


@dataclass
class EvalReport:
    mse_angle: float
    mse_speed: float
    n_samples: int
    per_zone: dict = field(default_factory=dict)

    @property
    def combined(self) -> float:
        return self.mse_angle + self.mse_speed

    def to_json(self) -> dict:
        return {
            "overall": {"mse_angle": self.mse_angle, "mse_speed": self.mse_speed, "combined": self.combined},
            "per_zone": {
                z: {"mse_angle": s.mse_angle, "mse_speed": s.mse_speed, "count": s.count}
                for z, s in self.per_zone.items()
            },
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(
            mse_angle=d["overall"]["mse_angle"],
            mse_speed=d["overall"]["mse_speed"],
            n_samples=d["n_samples"],
            per_zone={z: ZoneScore(**s) for z, s in d["per_zone"].items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        rows = [("Overall", self.mse_angle, self.mse_speed, self.n_samples)]
        rows += [(z, s.mse_angle, s.mse_speed, s.count) for z, s in self.per_zone.items()]
        name_w = max(len(r[0]) for r in rows + [("Zone", 0, 0, 0)])
        lines = [f"{'Zone':<{name_w}}  {'MSE Angle':>12}  {'MSE Speed':>10}  {'Count':>7}"]
        lines.append("-" * len(lines[0]))
        for name, a, s, n in rows:
            lines.append(f"{name:<{name_w}}  {a:>12,.1f}  {s:>10,.1f}  {n:>7d}")
        return "\n".join(lines) + "\n"


def mse(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("mse of an empty series")
    if p.shape != t.shape:
        raise ValueError(f"series lengths differ ({p.size} vs {t.size})")
    d = p - t
    return float(np.mean(d * d))


def _zone_order(tags) -> list:
    seen = {t for ts in tags for t in ts}
    known = [z for z in ZONE_VOCABULARY if z in seen]
    return known + sorted(seen - set(ZONE_VOCABULARY))


def per_zone_report(pred_angle, pred_speed, true_angle, true_speed, zone_tags) -> EvalReport:
    pa, ps = np.asarray(pred_angle, float), np.asarray(pred_speed, float)
    ta, ts = np.asarray(true_angle, float), np.asarray(true_speed, float)
    tags = [frozenset(t) for t in zone_tags]
    if not (len(pa) == len(ps) == len(ta) == len(ts) == len(tags)):
        raise ValueError("prediction, truth and tag series must be aligned")
    report = EvalReport(mse(pa, ta), mse(ps, ts), len(pa))
    for zone in _zone_order(tags):
        sel = np.array([zone in t for t in tags])
        report.per_zone[zone] = ZoneScore(mse(pa[sel], ta[sel]), mse(ps[sel], ts[sel]), int(sel.sum()))
    return report


def angle_histogram(values, bin_width_deg: float = 5.0) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if np.any(np.abs(v) > 180.0) or np.any(~np.isfinite(v)):
        raise ValueError("angles must lie within [-180, 180]")
    n_bins = int(round(180.0 / bin_width_deg))
    idx = np.minimum((np.abs(v) // bin_width_deg).astype(np.int64), n_bins - 1)
    return np.bincount(idx, minlength=n_bins)
