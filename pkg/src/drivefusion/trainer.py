"""Training loop, learning-rate schedules, best-checkpoint tracking and inference."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import storage
from .dataset.records import Chapter, DatasetManifest
from .model_zoo import (
    MASK_CHANNELS,
    Batch,
    DriveModel,
    ModelSpec,
    Prediction,
    build_model,
    check_batch,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import (
    NO_AUGMENT,
    AugmentConfig,
    NormStats,
    ResolutionTier,
    apply_augment,
    denormalize,
    downsample_mask,
    downsample_spatial,
    draw_augment,
    get_tier,
    normalize_semantic,
    stack_mask,
    stats_from_moments,
    _Moments,
)
from .series import PredictionSeries

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "m2_single_decay", "halve_20_30_40")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 5
    schedule: str = "constant"
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    tier: str = "s3"
    temporal_stride: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


TRAIN_PRESETS = {
    "model1": TrainConfig(lr0=1e-4, batch_size=64, epochs=2, tier="s2", temporal_stride=20),
    "model1-r152": TrainConfig(lr0=1e-4, batch_size=8, epochs=1, tier="s2", temporal_stride=20),
    "model1-sem20": TrainConfig(lr0=1e-4, batch_size=8, epochs=5, tier="s3", temporal_stride=40),
    "model1-sem47": TrainConfig(lr0=1e-4, batch_size=64, epochs=1, tier="s2", temporal_stride=20),
    "model2-single": TrainConfig(lr0=3e-4, batch_size=13, epochs=90, schedule="m2_single_decay", tier="s3", temporal_stride=40),
    "model2-stacked": TrainConfig(lr0=3e-4, batch_size=13, epochs=90, schedule="m2_single_decay", tier="s3", temporal_stride=40),
    "model2-sequence": TrainConfig(lr0=3e-3, batch_size=13, epochs=50, schedule="halve_20_30_40", tier="s3", temporal_stride=40),
    "model3": TrainConfig(lr0=1e-4, batch_size=64, epochs=10, tier="s3", temporal_stride=40),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise KeyError(f"unknown training preset {name!r}; presets: {', '.join(TRAIN_PRESETS)}")
    return replace(TRAIN_PRESETS[name], **overrides)


def lr_at(schedule: str, lr0: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule == "constant":
        return lr0
    if schedule == "m2_single_decay":
        # 3e-4 -> 1e-4, 5e-5, 3e-5 after epochs 5, 15, 20 (scaled to lr0)
        for start, factor in ((20, 0.1), (15, 1.0 / 6.0), (5, 1.0 / 3.0)):
            if epoch >= start:
                return lr0 * factor
        return lr0
    if schedule == "halve_20_30_40":
        return lr0 * 0.5 ** sum(epoch >= t for t in (20, 30, 40))
    raise ValueError(f"unknown schedule {schedule!r}")


def loss(pred, target):
    """Sum over targets of the batch-mean squared error (angle + speed), normalized units."""
    if isinstance(pred, Prediction):
        pred = np.stack([pred.angle_norm, pred.speed_norm], axis=1)
    if torch.is_tensor(pred):
        target = torch.as_tensor(target, dtype=pred.dtype)
        return ((pred - target) ** 2).mean(dim=0).sum()
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(((pred - target) ** 2).mean(axis=0).sum())


# --------------------------------------------------------------------------- data


@dataclass
class ChapterArrays:
    """One chapter held compactly in memory (8-bit images)."""

    chapter_id: str
    split: str
    frame_index: np.ndarray
    timestamp_ms: np.ndarray
    angle: np.ndarray
    speed: np.ndarray
    semantic: np.ndarray  # normalized features, (N, D) float32
    tags: list
    front: np.ndarray | None = None  # (N, H, W, 3) uint8
    seg: np.ndarray | None = None  # (N, H, W) uint8
    map: np.ndarray | None = None

    def __len__(self):
        return len(self.angle)


def position_stride(spec: ModelSpec, temporal_stride: int) -> int:
    return max(1, int(round(spec.history_stride / max(1, temporal_stride))))


def _needs(spec: ModelSpec):
    mask = spec.variant.startswith("m2")
    return {"front": True, "seg": mask, "map": spec.variant == "m3"}


def load_arrays(manifest: DatasetManifest, chapter_id: str, stats: NormStats | None, spec: ModelSpec | None, tier=None) -> ChapterArrays:
    entry = next(c for c in manifest.chapters if c.chapter_id == chapter_id)
    cdir = Path(manifest.root_path) / chapter_id
    rows = storage.read_labels(cdir / storage.LABELS)
    need = _needs(spec) if spec is not None else {"front": True, "seg": True, "map": True}
    tier = get_tier(tier) if tier is not None else None
    onehot = storage.folder_onehot(entry.route_id) if manifest.folder_features else None
    idx, ts, ang, spd, tags, sem = [], [], [], [], [], []
    fronts, segs, maps = [], [], []
    for r in rows:
        i, t, a, s, tg, values, miss = storage.parse_label_row(r)
        idx.append(i)
        ts.append(t)
        ang.append(a)
        spd.append(s)
        tags.append(tg)
        if stats is not None:
            from .dataset.records import SemanticRecord

            feats = normalize_semantic(SemanticRecord(values, miss, onehot), stats)
            if spec is not None and spec.semantic_dim:
                feats = feats[: spec.semantic_dim]
            sem.append(feats)
        if need["front"]:
            fronts.append(_read_rgb(cdir / storage.frame_name("front", i), tier))
        if need["seg"]:
            m = storage.read_mask(cdir / storage.frame_name("seg", i))
            segs.append(downsample_mask(m, tier) if tier is not None else m)
        if need["map"]:
            maps.append(_read_rgb(cdir / storage.frame_name("map", i), tier))
    return ChapterArrays(
        chapter_id=chapter_id,
        split=entry.split,
        frame_index=np.array(idx, dtype=np.int64),
        timestamp_ms=np.array(ts, dtype=np.int64),
        angle=np.array(ang),
        speed=np.array(spd),
        semantic=np.array(sem, dtype=np.float32) if sem else np.zeros((len(idx), 0), np.float32),
        tags=tags,
        front=np.stack(fronts) if fronts else None,
        seg=np.stack(segs) if segs else None,
        map=np.stack(maps) if maps else None,
    )


def _read_rgb(path, tier):
    img = storage.read_rgb_u8(path)
    if tier is None or (img.shape[1], img.shape[0]) == (tier.width, tier.height):
        return img
    return np.rint(downsample_spatial(img / 255.0, tier) * 255.0).astype(np.uint8)


def stats_from_arrays(chapters, manifest: DatasetManifest) -> NormStats:
    """NormStats over training arrays (images as stored, semantic over present fields)."""
    img, tgt, sem = _Moments(3), _Moments(2), _Moments(20)
    n = 0
    for ca in chapters:
        if ca.split != "train":
            raise TrainingError(f"chapter {ca.chapter_id} ({ca.split}) must not feed normalization stats")
        cdir = Path(manifest.root_path) / ca.chapter_id
        for r in storage.read_labels(cdir / storage.LABELS):
            _, _, a, s, _, values, miss = storage.parse_label_row(r)
            tgt.add([[a, s]])
            sem.add(values[None], (~miss).astype(np.float64)[None])
            n += 1
        if ca.front is not None:
            for f in ca.front:
                img.add(f.reshape(-1, 3) / 255.0)
    return stats_from_moments(img, tgt, sem, n)


def eligible_positions(n_frames: int, spec: ModelSpec, pos_stride: int) -> np.ndarray:
    first = (spec.sequence_length - 1) * pos_stride
    return np.arange(first, n_frames)


class BatchBuilder:
    """Turns (chapter, end position) samples into model-ready tensors."""

    def __init__(self, spec: ModelSpec, stats: NormStats, pos_stride: int, dtype=torch.float32):
        self.spec = spec
        self.stats = stats
        self.pos_stride = pos_stride
        self.dtype = dtype
        self.img_mean = np.asarray(stats.image_mean, dtype=np.float32)
        self.img_std = np.asarray(stats.image_std, dtype=np.float32)

    def _frames(self, ca: ChapterArrays, end: int):
        length = self.spec.sequence_length
        return list(range(end - (length - 1) * self.pos_stride, end + 1, self.pos_stride))

    def build(self, arrays, samples, augment: AugmentConfig = NO_AUGMENT, rng=None) -> Batch:
        spec = self.spec
        fronts, maps, sems, targets, tags = [], [], [], [], []
        for ci, end in samples:
            ca = arrays[ci]
            positions = self._frames(ca, end)
            draw = draw_augment(augment, rng) if rng is not None else None
            angle = ca.angle[end]
            seq = []
            for p in positions:
                img = ca.front[p].astype(np.float32) / 255.0
                mask = ca.seg[p] if ca.seg is not None else None
                if draw is not None:
                    img, mask, _ = apply_augment(img, mask, 0.0, draw)
                img = (img - self.img_mean) / self.img_std
                if spec.variant.startswith("m2"):
                    img = stack_mask(img, mask)
                seq.append(img)
            if draw is not None and draw.flip:
                angle = -angle
            if spec.variant in ("m2_single", "m2_stacked"):
                x = np.concatenate(seq, axis=-1).transpose(2, 0, 1)
            else:
                x = np.stack([s.transpose(2, 0, 1) for s in seq])
            fronts.append(x)
            if spec.variant == "m3":
                # map images are never augmented, flips included
                m = ca.map[end].astype(np.float32) / 255.0
                maps.append(((m - self.img_mean) / self.img_std).transpose(2, 0, 1))
            if spec.semantic_dim:
                sems.append(ca.semantic[end])
            targets.append(
                (
                    (angle - self.stats.angle_mean) / self.stats.angle_std,
                    (ca.speed[end] - self.stats.speed_mean) / self.stats.speed_std,
                )
            )
            tags.append(ca.tags[end])
        images = {"front": torch.from_numpy(np.ascontiguousarray(np.stack(fronts))).to(self.dtype)}
        if maps:
            images["map"] = torch.from_numpy(np.ascontiguousarray(np.stack(maps))).to(self.dtype)
        semantic = torch.from_numpy(np.stack(sems)).to(self.dtype) if sems else None
        return Batch(images=images, semantic=semantic, targets=torch.tensor(targets, dtype=self.dtype), zone_tags=tags)


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict
    stats: NormStats
    meta: dict

    def model(self) -> DriveModel:
        m = build_model(_no_pretrain(self.spec), 0)
        m.spec = self.spec
        m.load_state_dict(self.state)
        m.eval()
        return m

    def save(self, path) -> None:
        save_checkpoint(path, self.model(), self.stats, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model, stats, meta = load_checkpoint(path)
        return cls(model.spec, copy.deepcopy(model.state_dict()), stats, meta)


def _no_pretrain(spec: ModelSpec) -> ModelSpec:
    return replace(spec, backbones={k: replace(v, pretrained=False) for k, v in spec.backbones.items()})


@dataclass
class CheckpointSet:
    best_angle: Checkpoint
    best_speed: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, val_angle_mse, val_speed_mse

    @property
    def best_angle_curve(self) -> list:
        return list(np.minimum.accumulate([h["val_angle_mse"] for h in self.history]))

    @property
    def best_speed_curve(self) -> list:
        return list(np.minimum.accumulate([h["val_speed_mse"] for h in self.history]))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.best_angle.save(out / "best_angle.ckpt")
        self.best_speed.save(out / "best_speed.ckpt")
        self.last.save(out / "last.ckpt")
        write_history(self.history, out / "history.csv")


HISTORY_HEADER = ["epoch", "lr", "train_loss", "val_angle_mse", "val_speed_mse"]


def write_history(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for h in history:
            w.writerow([h["epoch"]] + [format(float(h[k]), ".17g") for k in HISTORY_HEADER[1:]])


def read_history(path) -> list:
    with Path(path).open(newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_HEADER[1:]}}
            for r in csv.DictReader(fh)
        ]


# --------------------------------------------------------------------------- training


@dataclass
class PreparedData:
    train: list
    val: list
    stats: NormStats
    pos_stride: int


def prepare_data(spec: ModelSpec, manifest: DatasetManifest, cfg: TrainConfig, stats: NormStats | None = None) -> PreparedData:
    train_ids = [c.chapter_id for c in manifest.split_entries("train")]
    val_ids = [c.chapter_id for c in manifest.split_entries("validation")]
    if not train_ids:
        raise TrainingError("manifest has no training chapters")
    if not val_ids:
        raise TrainingError("manifest has no validation chapters")
    tier = _effective_tier(manifest, cfg)
    if stats is None:
        raw = [load_arrays(manifest, cid, None, spec, tier) for cid in train_ids]
        stats = stats_from_arrays(raw, manifest)
    elif stats.provenance != "train":
        raise TrainingError(f"normalization stats come from {stats.provenance!r}, not the training split")
    train = [load_arrays(manifest, cid, stats, spec, tier) for cid in train_ids]
    val = [load_arrays(manifest, cid, stats, spec, tier) for cid in val_ids]
    if spec.semantic_dim == 47 and not manifest.folder_features:
        raise TrainingError("47-feature model needs folder indicators in the dataset")
    return PreparedData(train, val, stats, position_stride(spec, manifest.temporal_stride))


def _effective_tier(manifest: DatasetManifest, cfg: TrainConfig):
    w, h = manifest.resolution
    tier = get_tier(cfg.tier)
    if (tier.width, tier.height) == (w, h):
        return None
    if tier.width > w:
        log.warning("tier %s is larger than the stored %dx%d data; using stored size", tier.name, w, h)
        return None
    return tier


def _samples(arrays, spec, pos_stride):
    out = []
    for ci, ca in enumerate(arrays):
        out.extend((ci, int(p)) for p in eligible_positions(len(ca), spec, pos_stride))
    return out


def _has_batchnorm(model) -> bool:
    return any(isinstance(m, torch.nn.BatchNorm1d) for m in model.modules())


def evaluate_arrays(model, builder: BatchBuilder, arrays, batch_size: int):
    """Raw-unit predictions and truths over every eligible sample, in order."""
    samples = _samples(arrays, model.spec, builder.pos_stride)
    model.eval()
    pa, ps = [], []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            batch = builder.build(arrays, samples[k : k + batch_size])
            out = model(batch.images, batch.semantic).double().numpy()
            pa.append(out[:, 0])
            ps.append(out[:, 1])
    st = builder.stats
    pred_a = denormalize(np.concatenate(pa), st.angle_mean, st.angle_std)
    pred_s = denormalize(np.concatenate(ps), st.speed_mean, st.speed_std)
    true_a = np.array([arrays[c].angle[p] for c, p in samples])
    true_s = np.array([arrays[c].speed[p] for c, p in samples])
    return samples, pred_a, pred_s, true_a, true_s


def train(spec: ModelSpec, manifest: DatasetManifest, cfg: TrainConfig, out_dir=None, stats: NormStats | None = None,
          data: PreparedData | None = None, on_epoch=None) -> CheckpointSet:
    """Adam training; ``on_epoch`` (if given) receives every epoch's Checkpoint."""
    data = data or prepare_data(spec, manifest, cfg, stats)
    torch.manual_seed(cfg.seed)
    model = build_model(spec, cfg.seed)
    builder = BatchBuilder(spec, data.stats, data.pos_stride)
    train_samples = _samples(data.train, spec, data.pos_stride)
    if not train_samples or not _samples(data.val, spec, data.pos_stride):
        raise TrainingError("not enough history in the training or validation chapters for this model")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    bn = _has_batchnorm(model)

    history, best_a, best_s = [], None, None
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, cfg.lr0, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order_rng = np.random.default_rng([cfg.seed, epoch, 0])
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        order = order_rng.permutation(len(train_samples))
        model.train()
        total, count = 0.0, 0
        for bi, k in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[k : k + cfg.batch_size]
            if bn and len(idx) < 2:
                continue
            batch = builder.build(data.train, [train_samples[i] for i in idx], cfg.augment, aug_rng)
            out = model(batch.images, batch.semantic)
            value = loss(out, batch.targets)
            if not torch.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad(set_to_none=True)
            value.backward()
            opt.step()
            total += float(value.detach()) * len(idx)
            count += len(idx)
        _, pa, ps, ta, ts = evaluate_arrays(model, builder, data.val, cfg.eval_batch_size)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total / max(count, 1),
            "val_angle_mse": float(np.mean((pa - ta) ** 2)),
            "val_speed_mse": float(np.mean((ps - ts) ** 2)),
        }
        history.append(rec)
        log.info("epoch %d lr %.2e train %.4f val angle %.3f speed %.3f", epoch, lr, rec["train_loss"], rec["val_angle_mse"], rec["val_speed_mse"])
        meta = dict(rec)
        snap = Checkpoint(spec, copy.deepcopy(model.state_dict()), data.stats, meta)
        if on_epoch is not None:
            on_epoch(snap)
        if best_a is None or rec["val_angle_mse"] < best_a.meta["val_angle_mse"]:
            best_a = snap
        if best_s is None or rec["val_speed_mse"] < best_s.meta["val_speed_mse"]:
            best_s = snap
    if not history:
        raise TrainingError("epochs must be >= 1")
    result = CheckpointSet(best_a, best_s, snap, history)
    if out_dir is not None:
        result.save(out_dir)
    return result


# --------------------------------------------------------------------------- inference


def _as_model(ck):
    if isinstance(ck, Checkpoint):
        return ck.model(), ck.stats
    if isinstance(ck, (str, Path)):
        model, stats, _ = load_checkpoint(ck)
        return model, stats
    return ck, None


def predict_arrays(angle_ck, ca: ChapterArrays, stats: NormStats, speed_ck=None, pos_stride: int = 1, batch_size: int = 16) -> PredictionSeries:
    """Predictions for one chapter; angle and speed may come from different checkpoints."""
    if stats is None:
        raise TrainingError("normalization stats are required for prediction")
    angle_model, _ = _as_model(angle_ck)
    speed_model = angle_model if speed_ck is None else _as_model(speed_ck)[0]
    builder = BatchBuilder(angle_model.spec, stats, pos_stride)
    _, pa, ps, _, _ = evaluate_arrays(angle_model, builder, [ca], batch_size)
    if speed_model is not angle_model:
        _, _, ps, _, _ = evaluate_arrays(speed_model, BatchBuilder(speed_model.spec, stats, pos_stride), [ca], batch_size)
    pos = eligible_positions(len(ca), angle_model.spec, pos_stride)
    first = int(pos[0]) if len(pos) else len(ca)
    return PredictionSeries(
        [ca.chapter_id] * len(pos),
        ca.frame_index[pos],
        ca.timestamp_ms[pos],
        pa,
        ps,
        absent=[(ca.chapter_id, int(i)) for i in ca.frame_index[:first]],
    )


def predict_chapter(checkpoint, chapter, stats: NormStats | None, speed_checkpoint=None, temporal_stride: int = 1) -> PredictionSeries:
    """Denormalized per-frame predictions for an in-memory Chapter or ChapterArrays."""
    if stats is None:
        raise TrainingError("normalization stats are required for prediction")
    model, _ = _as_model(checkpoint)
    ca = chapter if isinstance(chapter, ChapterArrays) else chapter_to_arrays(chapter, stats, model.spec)
    pos_stride = position_stride(model.spec, temporal_stride)
    return predict_arrays(model, ca, stats, speed_checkpoint, pos_stride)


def chapter_to_arrays(chapter: Chapter, stats: NormStats, spec: ModelSpec) -> ChapterArrays:
    need = _needs(spec)
    sem = []
    for f in chapter.frames:
        feats = normalize_semantic(f.semantic, stats)
        sem.append(feats[: spec.semantic_dim] if spec.semantic_dim else feats)

    def u8(images):
        return np.stack([np.rint(np.asarray(im) * 255.0).astype(np.uint8) for im in images])

    fr = chapter.frames
    return ChapterArrays(
        chapter_id=chapter.chapter_id,
        split=chapter.split,
        frame_index=np.array([f.frame_index for f in fr], dtype=np.int64),
        timestamp_ms=np.array([f.timestamp_ms for f in fr], dtype=np.int64),
        angle=np.array([f.angle_deg for f in fr]),
        speed=np.array([f.speed_kmh for f in fr]),
        semantic=np.array(sem, dtype=np.float32),
        tags=[f.zone_tags for f in fr],
        front=u8([f.front_image for f in fr]) if need["front"] else None,
        seg=np.stack([f.seg_mask for f in fr]) if need["seg"] else None,
        map=u8([f.map_image for f in fr]) if need["map"] else None,
    )


def predict_split(angle_ck, manifest: DatasetManifest, split: str, speed_ck=None, stats: NormStats | None = None) -> PredictionSeries:
    model, ck_stats = _as_model(angle_ck)
    stats = stats or ck_stats
    if stats is None:
        raise TrainingError("normalization stats are required for prediction")
    pos_stride = position_stride(model.spec, manifest.temporal_stride)
    parts = []
    for entry in manifest.split_entries(split):
        ca = load_arrays(manifest, entry.chapter_id, stats, model.spec, None)
        parts.append(predict_arrays(model, ca, stats, speed_ck, pos_stride))
    return PredictionSeries.concat(parts)
