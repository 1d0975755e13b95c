"""Dead-reckoning path reconstruction from steering-angle and speed series.

Angle and speed are held constant over each sampling interval. The heading
rate is proportional to the steering angle (``gain_k`` heading-degrees per
steering-degree per second); positions advance with the pre-step heading.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class KinematicsConfig:
    dt: float = 0.1
    gain_k: float = 1.0
    initial_heading: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.gain_k > 0:
            raise ValueError(f"gain_k must be positive, got {self.gain_k}")


@dataclass
class Path2D:
    points: np.ndarray  # (n + 1, 2) metres
    headings: np.ndarray  # (n + 1,) radians, heading at each point

    def __len__(self):
        return len(self.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]


def integrate_path(angles_deg, speeds_kmh, cfg: KinematicsConfig | None = None) -> Path2D:
    cfg = cfg or KinematicsConfig()
    angles = np.asarray(angles_deg, dtype=np.float64).ravel()
    speeds = np.asarray(speeds_kmh, dtype=np.float64).ravel()
    if angles.shape != speeds.shape:
        raise ValueError(
            f"angle and speed series differ in length ({angles.size} vs {speeds.size})"
        )
    n = angles.size
    headings = np.empty(n + 1)
    headings[0] = cfg.initial_heading
    # heading increments are a cumulative sum; positions use the pre-step heading
    headings[1:] = cfg.initial_heading + np.cumsum(
        cfg.gain_k * angles * cfg.dt * (math.pi / 180.0)
    )
    step = speeds / 3.6 * cfg.dt
    points = np.zeros((n + 1, 2))
    points[1:, 0] = np.cumsum(step * np.cos(headings[:-1]))
    points[1:, 1] = np.cumsum(step * np.sin(headings[:-1]))
    return Path2D(points=points, headings=headings)


def path_length(path: Path2D) -> float:
    if len(path.points) < 2:
        return 0.0
    seg = np.diff(path.points, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def write_path_csv(path: Path2D, out) -> None:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x_m", "y_m", "heading_rad"])
        for i, ((x, y), h) in enumerate(zip(path.points, path.headings)):
            w.writerow([i, format(x, ".17g"), format(y, ".17g"), format(h, ".17g")])


def read_path_csv(src) -> Path2D:
    with Path(src).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x_m"]), float(r["y_m"])] for r in rows]).reshape(-1, 2)
    hd = np.array([float(r["heading_rad"]) for r in rows])
    return Path2D(points=pts, headings=hd)
