"""Down-sampling, normalization, imputation, augmentation and mask stacking."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset.records import N_SEG_CLASSES, N_SEMANTIC, Chapter, FrameRecord, SemanticRecord

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ResolutionTier:
    name: str
    width: int
    height: int


TIERS = {
    "full": ResolutionTier("full", 1920, 1080),
    "s1": ResolutionTier("s1", 640, 360),
    "s2": ResolutionTier("s2", 320, 180),
    "s3": ResolutionTier("s3", 160, 90),
}


def get_tier(name) -> ResolutionTier:
    if isinstance(name, ResolutionTier):
        return name
    try:
        return TIERS[name]
    except KeyError:
        raise ValueError(f"unknown resolution tier {name!r}; choose from {sorted(TIERS)}") from None


def _area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-averaging resample (box filter with fractional overlap weights)."""

    def weights(n_in, n_out):
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            i0, i1 = int(math.floor(lo)), min(n_in, int(math.ceil(hi)))
            for i in range(i0, i1):
                m[o, i] = min(hi, i + 1) - max(lo, i)
        return m / m.sum(axis=1, keepdims=True)

    h, w, c = image.shape
    wy = weights(h, out_h)
    wx = weights(w, out_w)
    # two separable passes as plain matrix products
    rows = wy @ image.astype(np.float64).reshape(h, w * c)
    cols = wx @ rows.reshape(out_h, w, c).transpose(1, 0, 2).reshape(w, out_h * c)
    return cols.reshape(out_w, out_h, c).transpose(1, 0, 2)


def downsample_spatial(image: np.ndarray, tier) -> np.ndarray:
    tier = get_tier(tier)
    img = np.asarray(image)
    h, w = img.shape[:2]
    if w * 9 != h * 16:
        raise ValueError(f"input {w}x{h} is not 16:9")
    if (w, h) == (tier.width, tier.height):
        return img
    if tier.width > w:
        raise ValueError(f"cannot up-sample {w}x{h} to tier {tier.name}")
    squeeze = img.ndim == 2
    src = img[:, :, None] if squeeze else img
    out = _area_resize(src, tier.height, tier.width)
    out = np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float64)
    return out[:, :, 0] if squeeze else out


def downsample_mask(mask: np.ndarray, tier) -> np.ndarray:
    """Nearest-centre sampling for label images (averaging labels is meaningless)."""
    tier = get_tier(tier)
    h, w = mask.shape
    if (w, h) == (tier.width, tier.height):
        return mask
    rows = ((np.arange(tier.height) + 0.5) * h / tier.height).astype(int)
    cols = ((np.arange(tier.width) + 0.5) * w / tier.width).astype(int)
    return mask[np.ix_(rows, cols)]


def downsample_temporal(chapter: Chapter, stride: int) -> Chapter:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return chapter
    # an already-strided chapter keeps its spacing, so strides compose multiplicatively
    idx = [f.frame_index for f in chapter.frames]
    spacing = math.gcd(*np.diff(idx).tolist()) if len(idx) > 1 else 1
    kept = [f for f in chapter.frames if f.frame_index % (spacing * stride) == 0]
    return Chapter(chapter.chapter_id, chapter.route_id, kept, chapter.split)


@dataclass
class NormStats:
    image_mean: list
    image_std: list
    angle_mean: float
    angle_std: float
    speed_mean: float
    speed_std: float
    semantic_mean: list
    semantic_std: list
    # where the statistics came from; training refuses anything but "train"
    provenance: str = "train"
    n_frames: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))


class _Moments:
    """Streaming weighted mean / M2, merging per-batch moments (Chan et al. update)."""

    def __init__(self, dim):
        self.n = np.zeros(dim)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x, weight=None):
        x = np.asarray(x, dtype=np.float64)
        w = np.ones_like(x) if weight is None else np.asarray(weight, dtype=np.float64)
        nb = w.sum(axis=0)
        has = nb > 0
        mb = np.where(has, (x * w).sum(axis=0) / np.where(has, nb, 1.0), 0.0)
        m2b = (w * (x - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        safe = np.where(n > 0, n, 1.0)
        self.mean = self.mean + delta * nb / safe
        self.m2 = self.m2 + m2b + delta * delta * self.n * nb / safe
        self.n = n

    def result(self):
        var = self.m2 / np.maximum(self.n, 1.0)
        return self.mean.copy(), np.maximum(np.sqrt(var), STD_FLOOR)


def fit_norm_stats(train_chapters, images: bool = True) -> NormStats:
    """Statistics over every frame of the training chapters (semantic: present entries only)."""
    chapters = list(train_chapters)
    for ch in chapters:
        if ch.split != "train":
            raise ValueError(f"chapter {ch.chapter_id} is in split {ch.split!r}; stats must come from train")
    if not chapters or not any(len(c.frames) for c in chapters):
        raise ValueError("cannot fit normalization statistics on an empty training set")
    img, tgt, sem = _Moments(3), _Moments(2), _Moments(N_SEMANTIC)
    n = 0
    for ch in chapters:
        for f in ch.frames:
            n += 1
            tgt.add([[f.angle_deg, f.speed_kmh]])
            present = (~np.asarray(f.semantic.missing, dtype=bool)).astype(np.float64)
            sem.add(np.asarray(f.semantic.values)[None], present[None])
            if images and f.front_image is not None:
                img.add(np.asarray(f.front_image).reshape(-1, 3))
    return stats_from_moments(img, tgt, sem, n, images)


def stats_from_moments(img, tgt, sem, n, images=True) -> NormStats:
    t_mean, t_std = tgt.result()
    s_mean, s_std = sem.result()
    if images and img.n.sum() > 0:
        i_mean, i_std = img.result()
    else:
        i_mean, i_std = np.zeros(3), np.ones(3)
    return NormStats(
        image_mean=[float(v) for v in i_mean],
        image_std=[float(v) for v in i_std],
        angle_mean=float(t_mean[0]),
        angle_std=float(t_std[0]),
        speed_mean=float(t_mean[1]),
        speed_std=float(t_std[1]),
        semantic_mean=[float(v) for v in s_mean],
        semantic_std=[float(v) for v in s_std],
        provenance="train",
        n_frames=int(n),
    )


def normalize(x, mean, std):
    if np.any(np.asarray(std) <= 0):
        raise ValueError("std must be positive")
    return (x - mean) / std


def denormalize(z, mean, std):
    return z * std + mean


def impute(record: SemanticRecord) -> SemanticRecord:
    missing = np.asarray(record.missing, dtype=bool)
    if not missing.any():
        return record
    values = np.where(missing, 0.0, np.asarray(record.values, dtype=np.float64))
    return SemanticRecord(values, missing.copy(), record.folder_onehot)


def normalize_semantic(record: SemanticRecord, stats: NormStats) -> np.ndarray:
    """Feature vector for the network: present fields z-scored, missing fields 0."""
    rec = impute(record)
    vals = normalize(np.asarray(rec.values, dtype=np.float64), np.asarray(stats.semantic_mean), np.asarray(stats.semantic_std))
    vals = np.where(rec.missing, 0.0, vals)
    if rec.folder_onehot is None:
        return vals
    return np.concatenate([vals, np.asarray(rec.folder_onehot, dtype=np.float64)])


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_brightness: float = 0.1
    brightness_range: tuple = (0.2, 0.75)
    p_affine: float = 0.25
    max_translate_frac: float = 0.05
    max_rotate_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip", "p_brightness", "p_affine"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        lo, hi = self.brightness_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"brightness_range must lie in (0, 1], got {self.brightness_range}")


NO_AUGMENT = AugmentConfig(p_flip=0.0, p_brightness=0.0, p_affine=0.0)


@dataclass(frozen=True)
class AugmentDraw:
    """One realized transform; applied identically to every frame of a sample."""

    flip: bool = False
    brightness: float | None = None
    shift: tuple | None = None  # (dy, dx) as fractions of height / width
    rotate_deg: float = 0.0


def draw_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    # fixed number of draws per call keeps the stream aligned regardless of outcome
    u = rng.random(3)
    factor = rng.uniform(*cfg.brightness_range)
    shift = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac, 2)
    rot = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
    affine = u[2] < cfg.p_affine
    return AugmentDraw(
        flip=bool(u[0] < cfg.p_flip),
        brightness=float(factor) if u[1] < cfg.p_brightness else None,
        shift=(float(shift[0]), float(shift[1])) if affine else None,
        rotate_deg=float(rot) if affine else 0.0,
    )


def _affine_coords(h, w, shift, rotate_deg):
    """Source coordinates for rotating about the centre then translating."""
    th = math.radians(rotate_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy -= cy + shift[0] * h
    xx -= cx + shift[1] * w
    src_y = math.cos(th) * yy - math.sin(th) * xx + cy
    src_x = math.sin(th) * yy + math.cos(th) * xx + cx
    return np.stack([src_y, src_x])


def apply_augment(image, mask, angle, draw: AugmentDraw):
    """Apply a realized transform to (image H x W x 3, mask H x W or None, angle)."""
    img = np.asarray(image)
    if draw.flip:
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
        angle = -angle
    if draw.shift is not None:
        h, w = img.shape[:2]
        coords = _affine_coords(h, w, draw.shift, draw.rotate_deg)
        img = np.stack(
            [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
            axis=-1,
        )
        if mask is not None:
            mask = ndimage.map_coordinates(mask, coords, order=0, mode="nearest").astype(mask.dtype)
    if draw.brightness is not None:
        img = np.clip(img * draw.brightness, 0.0, 1.0)
    return np.ascontiguousarray(img), (None if mask is None else np.ascontiguousarray(mask)), angle


def augment(frame: FrameRecord, cfg: AugmentConfig, rng: np.random.Generator) -> FrameRecord:
    """Randomly flip / darken / shift-rotate the front view; ``rng`` is advanced."""
    if frame.front_image is None:
        raise ValueError("augment needs a front image")
    draw = draw_augment(cfg, rng)
    if draw == AugmentDraw():
        return frame
    img, mask, angle = apply_augment(frame.front_image, frame.seg_mask, frame.angle_deg, draw)
    return replace(frame, front_image=img, seg_mask=mask, angle_deg=angle)


def stack_mask(image: np.ndarray, mask: np.ndarray, n_classes: int = N_SEG_CLASSES) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if mask.size and (mask.min() < 0 or mask.max() >= n_classes):
        raise ValueError(f"mask holds classes outside [0, {n_classes})")
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    onehot = np.eye(n_classes, dtype=dtype)[mask.astype(np.intp)]
    return np.concatenate([image.astype(dtype, copy=False), onehot], axis=-1)


SEQUENCE_LENGTH = 10


def stack_sequence(frames, length: int = SEQUENCE_LENGTH) -> np.ndarray:
    frames = list(frames)
    if len(frames) != length:
        raise ValueError(f"expected {length} stacked frames, got {len(frames)}")
    return np.concatenate(frames, axis=-1)


def cache_root(root, tier, stride: int) -> Path:
    root = Path(root)
    return root.parent / f"{root.name}_{get_tier(tier).name}_{stride}"


def build_cache(manifest, tier, stride: int, out_root=None, overwrite: bool = False):
    """Write a down-sampled copy of the dataset and its train-split NormStats.

    Returns the manifest of the cached dataset.
    """
    from .dataset import storage

    tier = get_tier(tier)
    src = Path(manifest.root_path)
    dst = Path(out_root) if out_root is not None else cache_root(src, tier, stride)
    if (dst / storage.MANIFEST).exists() and not overwrite:
        raise FileExistsError(f"{dst} already holds a prepared dataset")
    w, h = manifest.resolution
    if w * 9 != h * 16:
        raise ValueError(f"dataset resolution {w}x{h} is not 16:9")
    dst.mkdir(parents=True, exist_ok=True)

    entries = []
    img_m, tgt_m, sem_m = _Moments(3), _Moments(2), _Moments(N_SEMANTIC)
    n_train = 0
    for entry in manifest.chapters:
        sdir, ddir = src / entry.chapter_id, dst / entry.chapter_id
        ddir.mkdir(parents=True, exist_ok=True)
        rows = [r for r in storage.read_labels(sdir / storage.LABELS) if int(r[0]) % stride == 0]
        for r in rows:
            idx = int(r[0])
            front = storage.read_rgb_u8(sdir / storage.frame_name("front", idx)) / 255.0
            front = downsample_spatial(front, tier)
            mp = downsample_spatial(storage.read_rgb_u8(sdir / storage.frame_name("map", idx)) / 255.0, tier)
            seg = downsample_mask(storage.read_mask(sdir / storage.frame_name("seg", idx)), tier)
            storage.save_rgb(ddir / storage.frame_name("front", idx), front)
            storage.save_rgb(ddir / storage.frame_name("map", idx), mp)
            storage.save_mask(ddir / storage.frame_name("seg", idx), seg)
            if entry.split == "train":
                _, _, angle, speed, _, sem, miss = storage.parse_label_row(r)
                n_train += 1
                tgt_m.add([[angle, speed]])
                sem_m.add(sem[None], (~miss).astype(np.float64)[None])
                # stats over the stored 8-bit pixels, exactly what training will read
                img_m.add(np.rint(front * 255.0).reshape(-1, 3) / 255.0)
        storage.write_labels(ddir / storage.LABELS, rows)
        entries.append(type(entry)(entry.chapter_id, entry.route_id, entry.split, len(rows)))

    if n_train == 0:
        raise ValueError("dataset has no training frames")
    out = type(manifest)(
        root_path=str(dst),
        chapters=entries,
        resolution=(tier.width, tier.height),
        n_seg_classes=manifest.n_seg_classes,
        seed=manifest.seed,
        folder_features=manifest.folder_features,
        temporal_stride=manifest.temporal_stride * stride,
    )
    storage.write_manifest(out)
    stats_from_moments(img_m, tgt_m, sem_m, n_train).save(dst / "norm_stats.json")
    return out
