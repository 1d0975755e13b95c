"""Record types shared by the dataset, preprocessing and training code."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FPS = 10
FRAME_MS = 1000 // FPS

N_SEMANTIC = 20
N_FOLDERS = 27
N_SEG_CLASSES = 20

ANGLE_RANGE = (-180.0, 180.0)
SPEED_RANGE = (0.0, 160.0)

SEMANTIC_FIELDS = (
    "latitude",
    "longitude",
    "speed_limit",
    "free_flow_speed",
    "heading",
    "road_index",
    "dist_to_signal",
    "dist_to_yield",
    "dist_to_pedestrian_crossing",
    "dist_to_intersection",
    # generator-defined channels
    "curvature_near",
    "curvature_far",
    "road_width",
    "lane_count",
    "elevation",
    "slope",
    "urban_density",
    "gps_precision",
    "aux_a",
    "aux_b",
)
assert len(SEMANTIC_FIELDS) == N_SEMANTIC

SPEED_ZONES = ("Zone30", "Zone50", "Zone80")
MANEUVERS = ("Right", "Straight", "Left")
EVENTS = ("Pedestrian", "Traffic Light", "Yield")
ZONE_VOCABULARY = SPEED_ZONES + MANEUVERS + EVENTS

SPLITS = ("train", "validation", "test")


class DatasetError(Exception):
    """Raised when a dataset root is missing, unreadable or malformed."""


class IntegrityError(DatasetError):
    """Raised when files on disk disagree with the manifest."""


@dataclass(frozen=True)
class SemanticRecord:
    values: np.ndarray
    missing: np.ndarray
    folder_onehot: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.values) != N_SEMANTIC or len(self.missing) != N_SEMANTIC:
            raise ValueError(f"semantic record needs {N_SEMANTIC} values and flags")
        if self.folder_onehot is not None:
            oh = np.asarray(self.folder_onehot)
            if oh.shape != (N_FOLDERS,) or oh.sum() != 1 or not np.isin(oh, (0, 1)).all():
                raise ValueError("folder_onehot must be a 27-long one-hot vector")

    @property
    def n_features(self) -> int:
        return N_SEMANTIC + (N_FOLDERS if self.folder_onehot is not None else 0)

    def features(self) -> np.ndarray:
        vals = np.asarray(self.values, dtype=np.float64)
        if self.folder_onehot is None:
            return vals
        return np.concatenate([vals, np.asarray(self.folder_onehot, dtype=np.float64)])


@dataclass(frozen=True)
class FrameRecord:
    chapter_id: str
    frame_index: int
    timestamp_ms: int
    front_image: Optional[np.ndarray]
    map_image: Optional[np.ndarray]
    seg_mask: Optional[np.ndarray]
    semantic: SemanticRecord
    angle_deg: float
    speed_kmh: float
    zone_tags: frozenset = field(default_factory=frozenset)


@dataclass
class Chapter:
    chapter_id: str
    route_id: str
    frames: list
    split: str = "train"

    def __len__(self):
        return len(self.frames)

    @property
    def angles(self) -> np.ndarray:
        return np.array([f.angle_deg for f in self.frames], dtype=np.float64)

    @property
    def speeds(self) -> np.ndarray:
        return np.array([f.speed_kmh for f in self.frames], dtype=np.float64)


@dataclass(frozen=True)
class ChapterEntry:
    chapter_id: str
    route_id: str
    split: str
    frame_count: int


@dataclass
class DatasetManifest:
    root_path: str
    chapters: list
    resolution: tuple
    n_seg_classes: int = N_SEG_CLASSES
    seed: int = 0
    folder_features: bool = True
    # frame_index step between consecutive stored frames (1 for raw data)
    temporal_stride: int = 1

    def split_entries(self, split: str) -> list:
        return [c for c in self.chapters if c.split == split]

    def to_json(self) -> dict:
        return {
            "chapters": [
                {
                    "chapter_id": c.chapter_id,
                    "route_id": c.route_id,
                    "split": c.split,
                    "frame_count": c.frame_count,
                }
                for c in self.chapters
            ],
            "folder_features": self.folder_features,
            "n_seg_classes": self.n_seg_classes,
            "resolution": list(self.resolution),
            "seed": self.seed,
            "temporal_stride": self.temporal_stride,
        }

    @classmethod
    def from_json(cls, root_path, data: dict) -> "DatasetManifest":
        chapters = [ChapterEntry(**c) for c in data["chapters"]]
        return cls(
            root_path=str(root_path),
            chapters=chapters,
            resolution=tuple(data["resolution"]),
            n_seg_classes=int(data["n_seg_classes"]),
            seed=int(data["seed"]),
            folder_features=bool(data.get("folder_features", True)),
            temporal_stride=int(data.get("temporal_stride", 1)),
        )


def maneuver_tag(angle_deg: float) -> str:
    if angle_deg <= -10.0:
        return "Left"
    if angle_deg >= 10.0:
        return "Right"
    return "Straight"


def speed_zone_tag(speed_limit: float) -> str:
    return f"Zone{int(round(speed_limit))}"
