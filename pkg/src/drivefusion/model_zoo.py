"""Encoder / fusion / decoder networks predicting (steering angle, speed).

All models take a dict of image branches plus an optional semantic vector and
return a (B, 2) tensor of normalized (angle, speed). Variants:

    m1           two front frames 0.4 s apart -> CNN -> LSTM, optional semantic MLP
    m2_single    image + one-hot mask (23 ch) -> CNN -> two BN towers
    m2_stacked   ten image+mask frames stacked on channels (230 ch), same graph
    m2_sequence  per-frame (resnet, densenet, image+mask trunk) -> MLP -> bi-GRU
    m3           front frames -> CNN -> LSTM, map image -> CNN, semantic MLP
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .dataset.records import N_SEG_CLASSES
from .preprocess import NormStats, denormalize

log = logging.getLogger(__name__)

VARIANTS = ("m1", "m2_single", "m2_stacked", "m2_sequence", "m3")
FAMILIES = ("residual34", "residual50", "residual152", "dense121", "dense201", "toy_conv")

MASK_CHANNELS = 3 + N_SEG_CLASSES
HEAD_FLOOR = 16


class ModelError(ValueError):
    pass


# --------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "toy_conv"
    pretrained: bool = False
    in_channels: int = 3
    feature_dim: int = 256

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown backbone family {self.family!r}")


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    backbones: dict  # branch name -> BackboneSpec
    semantic_dim: int = 0  # 0 disables the semantic branch
    sequence_length: int = 1
    history_stride: int = 1  # raw 10 fps frames between consecutive inputs
    recurrent_hidden: int = 128
    decoder_dims: tuple = (1024, 512, 256)
    dropout: float = 0.1
    scale: float = 1.0
    semantic_hidden: tuple = (256, 128)
    fusion_dims: tuple = (512, 128)
    recurrent_layers: int = 1
    toy_width: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.scale > 0:
            raise ModelError("scale must be positive")
        if self.semantic_dim not in (0, 20, 47):
            raise ModelError(f"semantic_dim must be 0, 20 or 47, got {self.semantic_dim}")

    def width(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    @property
    def head_widths(self) -> tuple:
        # tiny scales would otherwise squeeze heads down to a couple of units
        return tuple(max(min(d, HEAD_FLOOR), self.width(d)) for d in self.decoder_dims) + (1,)

    def input_shapes(self) -> dict:
        """Expected per-branch shape after the batch axis, spatial dims excluded."""
        c = self.backbones
        if self.variant == "m1":
            return {"front": (self.sequence_length, 3)}
        if self.variant in ("m2_single", "m2_stacked"):
            return {"front": (c["front"].in_channels,)}
        if self.variant == "m2_sequence":
            return {"front": (self.sequence_length, MASK_CHANNELS)}
        return {"front": (self.sequence_length, 3), "map": (3,)}

    def to_json(self) -> dict:
        d = asdict(self)
        d["backbones"] = {k: asdict(v) for k, v in self.backbones.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["backbones"] = {k: BackboneSpec(**v) for k, v in d["backbones"].items()}
        for key in ("decoder_dims", "semantic_hidden", "fusion_dims"):
            d[key] = tuple(d[key])
        return cls(**d)


# --------------------------------------------------------------------------- backbones


class ToyConv(nn.Module):
    """Four stride-2 conv blocks, a coarse 3x5 spatial pool and a linear projection."""

    def __init__(self, in_channels: int, feature_dim: int, width: int = 16):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 4 * width]
        layers, prev = [], in_channels
        for c in chans:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU()]
            prev = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((3, 5))
        self.proj = nn.Linear(prev * 15, feature_dim)

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.proj(torch.flatten(x, 1))


class _Stub(nn.Module):
    """A parameter-free placeholder used for counting tests and zero-layer graphs."""

    def forward(self, x):
        return x


def _torchvision_backbone(family: str, feature_dim: int, pretrained: bool) -> nn.Module:
    import torchvision.models as tvm

    ctor = {
        "residual34": tvm.resnet34,
        "residual50": tvm.resnet50,
        "residual152": tvm.resnet152,
        "dense121": tvm.densenet121,
        "dense201": tvm.densenet201,
    }[family]
    net = None
    if pretrained:
        try:
            net = ctor(weights="DEFAULT")
        except Exception as exc:  # no cached weights and no network
            warnings.warn(f"pretrained weights for {family} unavailable ({exc}); using random init")
    if net is None:
        net = ctor(weights=None)
    if family.startswith("residual"):
        net.fc = nn.Linear(net.fc.in_features, feature_dim)
    else:
        net.classifier = nn.Linear(net.classifier.in_features, feature_dim)
    return net


def _first_conv(module: nn.Module):
    for name, child in module.named_modules():
        if isinstance(child, nn.Conv2d):
            parent = module
            *path, leaf = name.split(".")
            for p in path:
                parent = getattr(parent, p)
            return parent, leaf, child
    raise ModelError("backbone has no convolution layer")


def adapt_first_layer(backbone: nn.Module, in_channels: int) -> nn.Module:
    """Widen the first convolution to ``in_channels``.

    The existing kernels are copied into the first input channels and the new
    channels start at zero, so inputs whose extra channels are zero produce the
    same first-layer activations as before.
    """
    if in_channels < 3:
        raise ModelError("in_channels must be at least 3")
    parent, leaf, conv = _first_conv(backbone)
    if conv.in_channels == in_channels:
        return backbone
    if conv.groups != 1:
        raise ModelError("grouped first convolutions are not supported")
    new = nn.Conv2d(
        in_channels,
        conv.out_channels,
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        dilation=conv.dilation,
        bias=conv.bias is not None,
        padding_mode=conv.padding_mode,
    ).to(conv.weight.dtype)
    with torch.no_grad():
        new.weight.zero_()
        k = min(conv.in_channels, in_channels)
        new.weight[:, :k] = conv.weight[:, :k]
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    setattr(parent, leaf, new)
    return backbone


def build_backbone(spec: BackboneSpec, toy_width: int = 16) -> nn.Module:
    if spec.family == "toy_conv":
        return ToyConv(spec.in_channels, spec.feature_dim, toy_width)
    if spec.pretrained:
        net = _torchvision_backbone(spec.family, spec.feature_dim, True)
        return adapt_first_layer(net, spec.in_channels)
    net = _torchvision_backbone(spec.family, spec.feature_dim, False)
    if spec.in_channels != 3:
        # random init for every channel when nothing is pretrained
        parent, leaf, conv = _first_conv(net)
        setattr(
            parent,
            leaf,
            nn.Conv2d(spec.in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding, bias=conv.bias is not None),
        )
    return net


# --------------------------------------------------------------------------- heads


def mlp_head(in_dim: int, dims, dropout: float) -> nn.Sequential:
    layers, prev = [], in_dim
    for d in dims:
        layers += [nn.Linear(prev, d), nn.ReLU(), nn.Dropout(dropout)]
        prev = d
    layers.append(nn.Linear(prev, 1))
    return nn.Sequential(*layers)


def bn_head(in_dim: int, dims) -> nn.Sequential:
    layers, prev = [], in_dim
    for d in dims:
        layers += [nn.Linear(prev, d), nn.BatchNorm1d(d), nn.ReLU()]
        prev = d
    layers.append(nn.Linear(prev, 1))
    return nn.Sequential(*layers)


def semantic_mlp(in_dim: int, dims) -> nn.Sequential:
    layers, prev = [], in_dim
    for d in dims:
        layers += [nn.Linear(prev, d), nn.ReLU()]
        prev = d
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------- graphs


class DriveModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec

    def heads_out(self, z):
        return torch.cat([self.angle_head(z), self.speed_head(z)], dim=1)

    def final_layers(self):
        return [self.angle_head[-1], self.speed_head[-1]]


class Model1(DriveModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        bb = spec.backbones["front"]
        self.backbone = build_backbone(bb, spec.width(spec.toy_width))
        step_dim = bb.feature_dim
        sem_out = 0
        if spec.semantic_dim:
            hidden = tuple(spec.width(d) for d in spec.semantic_hidden)
            self.semantic = semantic_mlp(spec.semantic_dim, hidden)
            sem_out = hidden[-1]
            step_dim += sem_out
        self.lstm = nn.LSTM(step_dim, spec.width(spec.recurrent_hidden), batch_first=True)
        z_dim = spec.width(spec.recurrent_hidden) + sem_out
        dims = spec.head_widths[:-1]
        self.angle_head = mlp_head(z_dim, dims, spec.dropout)
        self.speed_head = mlp_head(z_dim, dims, spec.dropout)

    def forward(self, images, semantic=None):
        x = images["front"]  # (B, T, 3, H, W)
        b, t = x.shape[:2]
        feats = self.backbone(x.flatten(0, 1)).view(b, t, -1)
        if self.spec.semantic_dim:
            s = self.semantic(semantic)
            feats = torch.cat([feats, s[:, None].expand(b, t, s.shape[1])], dim=2)
        out, _ = self.lstm(feats)
        z = out[:, -1]
        if self.spec.semantic_dim:
            z = torch.cat([z, s], dim=1)
        return self.heads_out(z)


class Model2Single(DriveModel):
    """Shared by m2_single (23 channels) and m2_stacked (230 channels)."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        bb = spec.backbones["front"]
        self.backbone = build_backbone(bb, spec.width(spec.toy_width))
        dims = spec.head_widths[:-1]
        self.angle_head = bn_head(bb.feature_dim, dims)
        self.speed_head = bn_head(bb.feature_dim, dims)

    def forward(self, images, semantic=None):
        return self.heads_out(self.backbone(images["front"]))


class Model2Sequence(DriveModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        bbs = spec.backbones
        tw = spec.width(spec.toy_width)
        self.rgb_a = build_backbone(bbs["rgb_a"], tw)
        self.rgb_b = build_backbone(bbs["rgb_b"], tw)
        self.trunk = build_backbone(bbs["mask"], tw)
        cat = bbs["rgb_a"].feature_dim + bbs["rgb_b"].feature_dim + bbs["mask"].feature_dim
        f1, f2 = (spec.width(d) for d in spec.fusion_dims)
        self.fusion = nn.Sequential(
            nn.Linear(cat, f1), nn.ReLU(), nn.Dropout(spec.dropout),
            nn.Linear(f1, f2), nn.ReLU(), nn.Dropout(spec.dropout),
        )
        hid = spec.width(spec.recurrent_hidden)
        self.gru = nn.GRU(f2, hid, num_layers=spec.recurrent_layers, bidirectional=True, batch_first=True)
        z_dim = 2 * hid + f2
        dims = spec.head_widths[:-1]
        self.angle_head = mlp_head(z_dim, dims, spec.dropout)
        self.speed_head = mlp_head(z_dim, dims, spec.dropout)

    def forward(self, images, semantic=None):
        x = images["front"]  # (B, T, 23, H, W)
        b, t = x.shape[:2]
        flat = x.flatten(0, 1)
        rgb = flat[:, :3]
        feats = torch.cat([self.rgb_a(rgb), self.rgb_b(rgb), self.trunk(flat)], dim=1)
        h = self.fusion(feats).view(b, t, -1)
        out, _ = self.gru(h)
        z = torch.cat([out[:, -1], h[:, -1]], dim=1)
        return self.heads_out(z)


class Model3(DriveModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        tw = spec.width(spec.toy_width)
        front, mp = spec.backbones["front"], spec.backbones["map"]
        self.front_backbone = build_backbone(front, tw)
        self.map_backbone = build_backbone(mp, tw)
        hid = spec.width(spec.recurrent_hidden)
        self.lstm = nn.LSTM(front.feature_dim, hid, batch_first=True)
        z_dim = hid + mp.feature_dim
        if spec.semantic_dim:
            sem_hidden = tuple(spec.width(d) for d in spec.semantic_hidden)
            self.semantic = semantic_mlp(spec.semantic_dim, sem_hidden)
            z_dim += sem_hidden[-1]
        dims = spec.head_widths[:-1]
        self.angle_head = mlp_head(z_dim, dims, spec.dropout)
        self.speed_head = mlp_head(z_dim, dims, spec.dropout)

    def forward(self, images, semantic=None):
        x = images["front"]
        b, t = x.shape[:2]
        f = self.front_backbone(x.flatten(0, 1)).view(b, t, -1)
        out, _ = self.lstm(f)
        parts = [out[:, -1], self.map_backbone(images["map"])]
        if self.spec.semantic_dim:
            parts.append(self.semantic(semantic))
        return self.heads_out(torch.cat(parts, dim=1))


_GRAPHS = {
    "m1": Model1,
    "m2_single": Model2Single,
    "m2_stacked": Model2Single,
    "m2_sequence": Model2Sequence,
    "m3": Model3,
}


def build_model(spec: ModelSpec, seed: int = 0, dtype=torch.float32) -> DriveModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _GRAPHS[spec.variant](spec)
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------- forward


@dataclass
class Batch:
    images: dict
    semantic: Optional[torch.Tensor] = None
    targets: Optional[torch.Tensor] = None
    zone_tags: Optional[list] = None

    def __len__(self):
        return next(iter(self.images.values())).shape[0]


@dataclass
class Prediction:
    angle_norm: np.ndarray
    speed_norm: np.ndarray
    angle_deg: Optional[np.ndarray] = None
    speed_kmh: Optional[np.ndarray] = None


def check_batch(spec: ModelSpec, batch: Batch) -> None:
    sizes = set()
    for branch, want in spec.input_shapes().items():
        if branch not in batch.images:
            raise ModelError(f"batch lacks image branch {branch!r} (expected (B, {', '.join(map(str, want))}, H, W))")
        got = tuple(batch.images[branch].shape)
        if len(got) != len(want) + 3 or got[1 : 1 + len(want)] != want:
            raise ModelError(f"branch {branch!r}: expected shape (B, {', '.join(map(str, want))}, H, W), got {got}")
        sizes.add(got[0])
    if spec.semantic_dim:
        if batch.semantic is None:
            raise ModelError(f"branch 'semantic': expected shape (B, {spec.semantic_dim}), got nothing")
        if tuple(batch.semantic.shape[1:]) != (spec.semantic_dim,):
            raise ModelError(f"branch 'semantic': expected shape (B, {spec.semantic_dim}), got {tuple(batch.semantic.shape)}")
        sizes.add(batch.semantic.shape[0])
    if len(sizes) > 1:
        raise ModelError(f"inconsistent batch sizes across branches: {sorted(sizes)}")


def forward(model: DriveModel, batch: Batch, stats: NormStats | None = None, train: bool = False) -> Prediction:
    """Run the model on a batch; evaluation mode unless ``train`` is set."""
    check_batch(model.spec, batch)
    model.train(train)
    with torch.set_grad_enabled(train):
        out = model(batch.images, batch.semantic)
    out = out.detach().cpu().double().numpy()
    pred = Prediction(angle_norm=out[:, 0].copy(), speed_norm=out[:, 1].copy())
    if stats is not None:
        pred.angle_deg = denormalize(pred.angle_norm, stats.angle_mean, stats.angle_std)
        pred.speed_kmh = denormalize(pred.speed_norm, stats.speed_mean, stats.speed_std)
    return pred


# --------------------------------------------------------------------------- presets


def _bb(family, in_channels=3, feature_dim=256):
    return BackboneSpec(family=family, pretrained=family != "toy_conv", in_channels=in_channels, feature_dim=feature_dim)


PRESET_NAMES = (
    "model1",
    "model1-r152",
    "model1-sem20",
    "model1-sem47",
    "model2-single",
    "model2-stacked",
    "model2-sequence",
    "model3",
)


def model_preset(name: str, scale: float = 1.0, backbone: str | None = None) -> ModelSpec:
    """Architecture preset; ``backbone`` swaps every CNN family (e.g. ``toy_conv``)."""
    if name not in PRESET_NAMES:
        raise ModelError(f"unknown preset {name!r}; presets: {', '.join(PRESET_NAMES)}")

    def fam(default):
        return backbone or default

    def feat(family, native):
        return max(1, int(round(256 * scale))) if fam(family) == "toy_conv" else native

    if name.startswith("model1"):
        family = "residual152" if name == "model1-r152" else "residual34"
        sem = {"model1-sem20": 20, "model1-sem47": 47}.get(name, 0)
        return ModelSpec(
            variant="m1",
            backbones={"front": _bb(fam(family), 3, feat(family, 512))},
            semantic_dim=sem,
            sequence_length=2,
            history_stride=4,
            recurrent_hidden=128,
            decoder_dims=(1024, 512, 256),
            dropout=0.1,
            scale=scale,
        )
    if name in ("model2-single", "model2-stacked"):
        chans = MASK_CHANNELS if name == "model2-single" else 10 * MASK_CHANNELS
        return ModelSpec(
            variant="m2_single" if name == "model2-single" else "m2_stacked",
            backbones={"front": _bb(fam("dense121"), chans, feat("dense121", 1024))},
            sequence_length=1 if name == "model2-single" else 10,
            history_stride=1,
            decoder_dims=(200, 50, 10),
            dropout=0.0,
            scale=scale,
        )
    if name == "model2-sequence":
        return ModelSpec(
            variant="m2_sequence",
            backbones={
                "rgb_a": _bb(fam("residual34"), 3, feat("residual34", 512)),
                "rgb_b": _bb(fam("dense201"), 3, feat("dense201", 1024)),
                "mask": _bb(fam("dense121"), MASK_CHANNELS, feat("dense121", 1024)),
            },
            sequence_length=10,
            history_stride=1,
            recurrent_hidden=64,
            recurrent_layers=3,
            fusion_dims=(512, 128),
            decoder_dims=(256, 128, 32),
            dropout=0.2,
            scale=scale,
        )
    return ModelSpec(
        variant="m3",
        backbones={
            "front": _bb(fam("residual50"), 3, feat("residual50", 512)),
            "map": _bb(fam("residual34"), 3, feat("residual34", 512)),
        },
        semantic_dim=20,
        sequence_length=2,
        history_stride=4,
        recurrent_hidden=128,
        decoder_dims=(64, 32),
        dropout=0.2,
        scale=scale,
    )


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"DFCKPT01"


def save_checkpoint(path, model: DriveModel, stats: NormStats | None = None, meta: dict | None = None) -> None:
    """Single-file checkpoint: magic, header length, JSON header, raw tensor bytes."""
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "spec": model.spec.to_json(),
        "norm_stats": stats.to_json() if stats is not None else None,
        "meta": meta or {},
        "tensors": tensors,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_header(path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ModelError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path):
    """Returns (model, stats, meta); the model is in evaluation mode."""
    path = Path(path)
    data = path.read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ModelError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(data[start : start + n])
    body = start + n
    spec = ModelSpec.from_json(header["spec"])
    state = {}
    for t in header["tensors"]:
        dtype = np.dtype(t["dtype"]).newbyteorder("<")
        raw = data[body + t["offset"] : body + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(t["shape"]).astype(dtype.newbyteorder("="))
        state[t["name"]] = torch.from_numpy(arr.copy())
    dtype = next((v.dtype for v in state.values() if v.is_floating_point()), torch.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = build_model(replace(spec, backbones={k: replace(v, pretrained=False) for k, v in spec.backbones.items()}), 0, dtype)
    model.spec = spec
    model.load_state_dict(state)
    model.eval()
    stats = NormStats.from_json(header["norm_stats"]) if header["norm_stats"] else None
    return model, stats, header["meta"]
