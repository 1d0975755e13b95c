"""On-disk layout: manifest.json plus one directory of PNGs and labels.csv per chapter."""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .records import (
    FRAME_MS,
    N_FOLDERS,
    N_SEG_CLASSES,
    N_SEMANTIC,
    SPLITS,
    Chapter,
    ChapterEntry,
    DatasetError,
    DatasetManifest,
    FrameRecord,
    IntegrityError,
    SemanticRecord,
)
from .synthetic import FrameRenderer, SimParams, render_map, route_profile, simulate_chapter

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LABELS = "labels.csv"
PAPER_SPLIT = (548 / 682, 36 / 682, 98 / 682)

LABEL_HEADER = (
    ["frame_index", "timestamp_ms", "angle_deg", "speed_kmh", "zone_tags"]
    + [f"sem_{i:02d}" for i in range(N_SEMANTIC)]
    + [f"miss_{i:02d}" for i in range(N_SEMANTIC)]
)


@dataclass(frozen=True)
class GenConfig:
    n_routes: int = 4
    chapters_per_route: int = 4
    frames_per_chapter: int = 300
    resolution: tuple = (160, 90)
    seed: int = 0
    split_fractions: tuple = PAPER_SPLIT
    max_angle_step: float = 5.0

    def validate(self):
        if self.frames_per_chapter < 12:
            raise ValueError("frames_per_chapter must be at least 12")
        w, h = self.resolution
        if w * 9 != h * 16:
            raise ValueError(f"resolution {w}x{h} is not 16:9")
        if self.n_routes < 1 or self.chapters_per_route < 1:
            raise ValueError("need at least one route and one chapter per route")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def frame_name(kind: str, index: int) -> str:
    return f"{kind}_{index:05d}.png"


def save_rgb(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, optimize=False)


def read_rgb_u8(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)


def write_manifest(manifest: DatasetManifest) -> None:
    path = Path(manifest.root_path) / MANIFEST
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
    path.write_text(text)


def write_labels(path, rows: list) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        w.writerows(rows)


def label_row(frame_index, angle, speed, tags, sem, missing) -> list:
    return (
        [frame_index, frame_index * FRAME_MS, _fmt(angle), _fmt(speed), "|".join(sorted(tags))]
        + [_fmt(v) for v in sem]
        + [int(m) for m in missing]
    )


def read_labels(path) -> list:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != LABEL_HEADER:
                raise DatasetError(f"{path}: unexpected label header")
            return [r for r in reader]
    except (OSError, StopIteration) as exc:
        raise DatasetError(f"cannot read labels {path}: {exc}") from exc


def generate_synthetic(config: GenConfig, root, overwrite: bool = False) -> DatasetManifest:
    """Simulate and write a full dataset under ``root``; returns its manifest."""
    config.validate()
    root = Path(root)
    if (root / MANIFEST).exists():
        if not overwrite:
            raise FileExistsError(f"{root / MANIFEST} exists; pass overwrite=True to replace it")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    w, h = config.resolution
    params = SimParams(max_angle_step=config.max_angle_step)
    renderer = FrameRenderer(w, h)
    entries = []
    for r in range(config.n_routes):
        profile = route_profile(config.seed, r)
        route_id = f"route{r:02d}"
        for c in range(config.chapters_per_route):
            chapter_id = f"{route_id}_ch{c:03d}"
            sim = simulate_chapter(config.seed, r, c, config.frames_per_chapter, profile, params)
            _write_chapter(root / chapter_id, sim, renderer, (w, h), config.seed, r, c)
            entries.append(ChapterEntry(chapter_id, route_id, "train", config.frames_per_chapter))
            log.debug("wrote %s", chapter_id)

    manifest = DatasetManifest(
        root_path=str(root),
        chapters=entries,
        resolution=(w, h),
        n_seg_classes=N_SEG_CLASSES,
        seed=config.seed,
    )
    manifest = split_chapters(manifest, config.split_fractions, config.seed)
    write_manifest(manifest)
    return manifest


def _write_chapter(cdir: Path, sim, renderer, size, seed, r, c) -> None:
    cdir.mkdir(parents=True, exist_ok=True)
    w, h = size
    pix_rng = np.random.default_rng([seed, r, c, 0x1A6E])
    rows = []
    for i in range(len(sim.angle)):
        img, mask = renderer.render(sim, i, pix_rng)
        save_rgb(cdir / frame_name("front", i), img)
        save_mask(cdir / frame_name("seg", i), mask)
        save_rgb(cdir / frame_name("map", i), render_map(sim, i, w, h))
        rows.append(label_row(i, sim.angle[i], sim.speed[i], sim.tags[i], sim.semantic[i], sim.missing[i]))
    write_labels(cdir / LABELS, rows)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    try:
        manifest = DatasetManifest.from_json(root, json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    ids = [c.chapter_id for c in manifest.chapters]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate chapter ids")
    for entry in manifest.chapters:
        if entry.split not in SPLITS:
            raise DatasetError(f"{path}: unknown split {entry.split!r}")
        cdir = root / entry.chapter_id
        if not cdir.is_dir():
            raise IntegrityError(f"missing chapter directory {cdir}")
        n_front = len(list(cdir.glob("front_*.png")))
        if n_front != entry.frame_count:
            raise IntegrityError(
                f"{cdir}: manifest lists {entry.frame_count} frames, found {n_front} front images"
            )
        n_rows = len(read_labels(cdir / LABELS))
        if n_rows != entry.frame_count:
            raise IntegrityError(f"{cdir / LABELS}: {n_rows} rows, expected {entry.frame_count}")
    return manifest


def parse_label_row(row: list):
    idx = int(row[0])
    ts = int(row[1])
    angle, speed = float(row[2]), float(row[3])
    tags = frozenset(t for t in row[4].split("|") if t)
    sem = np.array([float(v) for v in row[5 : 5 + N_SEMANTIC]])
    miss = np.array([v == "1" for v in row[5 + N_SEMANTIC : 5 + 2 * N_SEMANTIC]])
    return idx, ts, angle, speed, tags, sem, miss


def folder_onehot(route_id: str) -> np.ndarray:
    oh = np.zeros(N_FOLDERS)
    oh[int(route_id.removeprefix("route")) % N_FOLDERS] = 1.0
    return oh


def load_chapter(manifest: DatasetManifest, chapter_id: str, images: bool = True) -> Chapter:
    """Load one chapter; images come back as float arrays in [0, 1]."""
    entry = next((c for c in manifest.chapters if c.chapter_id == chapter_id), None)
    if entry is None:
        raise KeyError(chapter_id)
    cdir = Path(manifest.root_path) / chapter_id
    onehot = folder_onehot(entry.route_id) if manifest.folder_features else None
    frames = []
    for row in read_labels(cdir / LABELS):
        idx, ts, angle, speed, tags, sem, miss = parse_label_row(row)
        if images:
            front = read_rgb_u8(cdir / frame_name("front", idx)).astype(np.float32) / 255.0
            mp = read_rgb_u8(cdir / frame_name("map", idx)).astype(np.float32) / 255.0
            seg = read_mask(cdir / frame_name("seg", idx))
        else:
            front = mp = seg = None
        frames.append(
            FrameRecord(
                chapter_id=chapter_id,
                frame_index=idx,
                timestamp_ms=ts,
                front_image=front,
                map_image=mp,
                seg_mask=seg,
                semantic=SemanticRecord(sem, miss, onehot),
                angle_deg=angle,
                speed_kmh=speed,
                zone_tags=tags,
            )
        )
    return Chapter(chapter_id, entry.route_id, frames, entry.split)


def largest_remainder(n: int, fractions) -> list:
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_chapters(manifest: DatasetManifest, fractions, seed: int, allow_empty: bool = False) -> DatasetManifest:
    """Assign whole chapters to train/validation/test, deterministic given ``seed``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("need three fractions (train, validation, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    if not allow_empty and any(f == 0 for f in fractions):
        raise ValueError("zero-size split requested; pass allow_empty=True to permit it")
    n = len(manifest.chapters)
    n_active = sum(f > 0 for f in fractions)
    if n < n_active:
        raise ValueError(f"{n} chapters cannot fill {n_active} splits")
    counts = largest_remainder(n, fractions)
    # a positive fraction never ends up with an empty split
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[i] = 1
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for split, k in zip(SPLITS, counts):
        labels[order[start : start + k]] = split
        start += k
    chapters = [
        ChapterEntry(c.chapter_id, c.route_id, str(lab), c.frame_count)
        for c, lab in zip(manifest.chapters, labels)
    ]
    return DatasetManifest(
        root_path=manifest.root_path,
        chapters=chapters,
        resolution=manifest.resolution,
        n_seg_classes=manifest.n_seg_classes,
        seed=manifest.seed,
        folder_features=manifest.folder_features,
        temporal_stride=manifest.temporal_stride,
    )


def load_sequence(chapter: Chapter, end_index: int, length: int, stride: int = 1) -> list:
    """``length`` frames ending at position ``end_index``, ``stride`` apart, oldest first."""
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    start = end_index - (length - 1) * stride
    if start < 0 or end_index >= len(chapter.frames):
        raise IndexError(
            f"{chapter.chapter_id}: need positions {start}..{end_index}, chapter has {len(chapter.frames)}"
        )
    return [chapter.frames[i] for i in range(start, end_index + 1, stride)]
