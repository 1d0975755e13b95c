"""Per-frame prediction series and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER = ["chapter_id", "frame_index", "timestamp_ms", "angle_deg", "speed_kmh"]


class AlignmentError(ValueError):
    pass


class SeriesFormatError(ValueError):
    pass


@dataclass
class PredictionSeries:
    chapter_ids: list
    frame_index: np.ndarray
    timestamp_ms: np.ndarray
    angle_deg: np.ndarray
    speed_kmh: np.ndarray
    # (chapter_id, frame_index) pairs that had too little history to predict
    absent: list = field(default_factory=list)

    def __post_init__(self):
        self.chapter_ids = [str(c) for c in self.chapter_ids]
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.timestamp_ms = np.asarray(self.timestamp_ms, dtype=np.int64)
        self.angle_deg = np.asarray(self.angle_deg, dtype=np.float64)
        self.speed_kmh = np.asarray(self.speed_kmh, dtype=np.float64)
        n = len(self.chapter_ids)
        for name in ("frame_index", "timestamp_ms", "angle_deg", "speed_kmh"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.chapter_ids)

    def keys(self) -> list:
        return list(zip(self.chapter_ids, self.frame_index.tolist(), self.timestamp_ms.tolist()))

    def with_values(self, angle, speed) -> "PredictionSeries":
        return PredictionSeries(
            list(self.chapter_ids), self.frame_index.copy(), self.timestamp_ms.copy(), angle, speed, list(self.absent)
        )

    @classmethod
    def concat(cls, parts) -> "PredictionSeries":
        parts = list(parts)
        if not parts:
            return cls([], [], [], [], [])
        return cls(
            [c for p in parts for c in p.chapter_ids],
            np.concatenate([p.frame_index for p in parts]),
            np.concatenate([p.timestamp_ms for p in parts]),
            np.concatenate([p.angle_deg for p in parts]),
            np.concatenate([p.speed_kmh for p in parts]),
            [a for p in parts for a in p.absent],
        )

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for c, i, t, a, s in zip(self.chapter_ids, self.frame_index, self.timestamp_ms, self.angle_deg, self.speed_kmh):
                w.writerow([c, int(i), int(t), format(float(a), ".17g"), format(float(s), ".17g")])

    @classmethod
    def from_csv(cls, path) -> "PredictionSeries":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != HEADER:
                raise SeriesFormatError(f"{path}: expected header {','.join(HEADER)}")
            rows = list(reader)
        try:
            return cls(
                [r[0] for r in rows],
                [int(r[1]) for r in rows],
                [int(r[2]) for r in rows],
                [float(r[3]) for r in rows],
                [float(r[4]) for r in rows],
            )
        except (ValueError, IndexError) as exc:
            raise SeriesFormatError(f"{path}: malformed row ({exc})") from None


def check_aligned(series) -> None:
    series = list(series)
    if not series:
        raise AlignmentError("no series given")
    ref = series[0].keys()
    for k, s in enumerate(series[1:], start=1):
        if s.keys() != ref:
            raise AlignmentError(f"series {k} is not aligned with series 0 on (chapter, frame, timestamp)")
