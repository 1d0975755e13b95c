import warnings

import numpy as np
import pytest
import torch
from torch import nn

from drivefusion.model_zoo import (
    MASK_CHANNELS,
    PRESET_NAMES,
    BackboneSpec,
    Batch,
    ModelError,
    ModelSpec,
    ToyConv,
    _Stub,
    adapt_first_layer,
    build_backbone,
    build_model,
    check_batch,
    forward,
    load_checkpoint,
    model_preset,
    parameter_count,
    read_checkpoint_header,
    save_checkpoint,
)
from drivefusion.preprocess import NormStats
from drivefusion.trainer import loss

H, W = 9, 16


def toy_batch(spec: ModelSpec, b=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    images = {}
    for branch, shape in spec.input_shapes().items():
        images[branch] = torch.rand((b, *shape, H, W), generator=g, dtype=dtype)
    sem = torch.randn((b, spec.semantic_dim), generator=g, dtype=dtype) if spec.semantic_dim else None
    return Batch(images, sem, torch.randn((b, 2), generator=g, dtype=dtype))


@pytest.fixture(scope="module")
def toy_specs():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {name: model_preset(name, 0.25, "toy_conv") for name in PRESET_NAMES}


# --------------------------------------------------------------------------- presets and shapes


def test_preset_names():
    assert PRESET_NAMES == (
        "model1", "model1-r152", "model1-sem20", "model1-sem47",
        "model2-single", "model2-stacked", "model2-sequence", "model3",
    )
    with pytest.raises(ModelError, match="model1-sem47"):
        model_preset("model9")


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_forward_shapes_and_finiteness(name, toy_specs):
    spec = toy_specs[name]
    model = build_model(spec, seed=1)
    pred = forward(model, toy_batch(spec, b=4))
    assert pred.angle_norm.shape == (4,) and pred.speed_norm.shape == (4,)
    assert np.all(np.isfinite(pred.angle_norm)) and np.all(np.isfinite(pred.speed_norm))


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_eval_mode_deterministic(name, toy_specs):
    spec = toy_specs[name]
    model = build_model(spec, seed=2)
    batch = toy_batch(spec)
    a, b = forward(model, batch), forward(model, batch)
    assert np.array_equal(a.angle_norm, b.angle_norm) and np.array_equal(a.speed_norm, b.speed_norm)


def test_dropout_train_mode_follows_rng(toy_specs):
    spec = toy_specs["model3"]
    model = build_model(spec, seed=3)
    batch = toy_batch(spec, b=8)
    torch.manual_seed(0)
    a = forward(model, batch, train=True)
    torch.manual_seed(0)
    b = forward(model, batch, train=True)
    c = forward(model, batch, train=True)
    assert np.array_equal(a.angle_norm, b.angle_norm)
    assert not np.array_equal(a.angle_norm, c.angle_norm)


def test_preset_structure(toy_specs):
    s = toy_specs
    assert s["model1"].sequence_length == 2 and s["model1"].history_stride == 4
    assert s["model1"].semantic_dim == 0
    assert s["model1-sem20"].semantic_dim == 20 and s["model1-sem47"].semantic_dim == 47
    assert s["model2-single"].input_shapes() == {"front": (MASK_CHANNELS,)}
    assert s["model2-stacked"].input_shapes() == {"front": (10 * MASK_CHANNELS,)}
    assert s["model2-sequence"].input_shapes() == {"front": (10, MASK_CHANNELS)}
    assert s["model2-sequence"].recurrent_layers == 3 and s["model2-sequence"].recurrent_hidden == 64
    assert set(s["model3"].input_shapes()) == {"front", "map"}
    full = model_preset("model3")
    assert full.decoder_dims == (64, 32) and full.dropout == 0.2
    assert full.backbones["front"].family == "residual50" and full.backbones["map"].family == "residual34"
    assert model_preset("model1-r152").backbones["front"].family == "residual152"
    assert model_preset("model2-single").decoder_dims == (200, 50, 10)


def test_model2_single_heads_use_batchnorm(toy_specs):
    model = build_model(toy_specs["model2-single"])
    assert any(isinstance(m, nn.BatchNorm1d) for m in model.modules())


def test_m2_sequence_bidirectional_gru(toy_specs):
    model = build_model(toy_specs["model2-sequence"])
    assert model.gru.bidirectional and model.gru.num_layers == 3


def test_spec_json_round_trip(toy_specs):
    for spec in toy_specs.values():
        assert ModelSpec.from_json(spec.to_json()) == spec


def test_spec_rejects_bad_values():
    bb = {"front": BackboneSpec("toy_conv", False, 3, 8)}
    with pytest.raises(ModelError):
        ModelSpec("m9", bb)
    with pytest.raises(ModelError):
        ModelSpec("m1", bb, semantic_dim=21)
    with pytest.raises(ModelError):
        ModelSpec("m1", bb, scale=0)


# --------------------------------------------------------------------------- batch validation


def test_check_batch_names_branch(toy_specs):
    spec = toy_specs["model3"]
    batch = toy_batch(spec)
    del batch.images["map"]
    with pytest.raises(ModelError, match="map"):
        check_batch(spec, batch)
    batch = toy_batch(spec)
    batch.images["front"] = batch.images["front"][:, :1]
    with pytest.raises(ModelError, match="front"):
        check_batch(spec, batch)
    batch = toy_batch(spec)
    batch.semantic = batch.semantic[:, :5]
    with pytest.raises(ModelError, match="semantic"):
        check_batch(spec, batch)


# --------------------------------------------------------------------------- zero heads


def test_zero_final_layers_give_zero(toy_specs):
    spec = toy_specs["model1"]
    model = build_model(spec, seed=4)
    with torch.no_grad():
        for layer in model.final_layers():
            layer.weight.zero_()
            layer.bias.zero_()
    batch = toy_batch(spec)
    batch.images["front"][:, 1] = batch.images["front"][:, 0]
    pred = forward(model, batch)
    assert np.all(pred.angle_norm == 0.0) and np.all(pred.speed_norm == 0.0)


def test_denormalized_outputs(toy_specs):
    spec = toy_specs["model1"]
    stats = NormStats([0.5] * 3, [0.2] * 3, 1.0, 20.0, 50.0, 10.0, [0.0] * 20, [1.0] * 20)
    pred = forward(build_model(spec), toy_batch(spec), stats)
    assert np.allclose(pred.angle_deg, pred.angle_norm * 20.0 + 1.0)
    assert np.allclose(pred.speed_kmh, pred.speed_norm * 10.0 + 50.0)


# --------------------------------------------------------------------------- first-layer adaptation


def test_adapt_toy_zero_extension():
    torch.manual_seed(0)
    base = ToyConv(3, 8, 4)
    x = torch.rand(2, 3, H, W)
    ref = base.features[0](x)
    adapted = adapt_first_layer(base, 23)
    x23 = torch.cat([x, torch.zeros(2, 20, H, W)], dim=1)
    assert torch.equal(adapted.features[0](x23), ref)


def test_adapt_residual_zero_extension():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        net = build_backbone(BackboneSpec("residual34", False, 3, 16))
    torch.manual_seed(1)
    x = torch.rand(1, 3, 32, 56)
    ref = net.conv1(x)
    adapt_first_layer(net, 23)
    assert net.conv1.in_channels == 23
    assert torch.equal(net.conv1(torch.cat([x, torch.zeros(1, 20, 32, 56)], 1)), ref)


def test_adapt_identity_at_three():
    base = ToyConv(3, 8, 4)
    conv = base.features[0]
    assert adapt_first_layer(base, 3).features[0] is conv


def test_adapt_230_channels():
    base = ToyConv(3, 8, 4)
    out_before = base.features[0].out_channels
    conv = adapt_first_layer(base, 230).features[0]
    assert conv.out_channels == out_before
    assert tuple(conv.weight.shape[:2]) == (out_before, 230)


def test_adapt_rejects_fewer_than_three():
    with pytest.raises(ModelError):
        adapt_first_layer(ToyConv(3, 8, 4), 2)


def test_pretrained_fallback_warns():
    with pytest.warns(UserWarning):
        net = build_backbone(BackboneSpec("residual34", True, 23, 16))
    assert net.conv1.in_channels == 23


# --------------------------------------------------------------------------- parameter counts


def test_count_monotone_in_scale():
    a = parameter_count(build_model(model_preset("model2-single", 0.25, "toy_conv")))
    b = parameter_count(build_model(model_preset("model2-single", 0.5, "toy_conv")))
    assert b > a


def test_count_stub():
    assert parameter_count(_Stub()) == 0


def test_count_m1_head_layer():
    spec = model_preset("model1", 1.0, "toy_conv")
    model = build_model(spec)
    layer = model.angle_head[3]
    assert (layer.in_features, layer.out_features) == (1024, 512)
    assert parameter_count(layer) == 1024 * 512 + 512


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, toy_specs):
    spec = toy_specs["model3"]
    model = build_model(spec, seed=5)
    stats = NormStats([0.5] * 3, [0.2] * 3, 1.0, 20.0, 50.0, 10.0, [0.0] * 20, [1.0] * 20)
    save_checkpoint(tmp_path / "m.ckpt", model, stats, {"epoch": 3, "val_angle_mse": 1.5})
    loaded, st, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert st == stats and meta["epoch"] == 3
    assert loaded.spec == spec
    for (k1, v1), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    batch = toy_batch(spec)
    assert np.array_equal(forward(model, batch).angle_norm, forward(loaded, batch).angle_norm)


def test_checkpoint_layout(tmp_path, toy_specs):
    model = build_model(toy_specs["model1"])
    save_checkpoint(tmp_path / "m.ckpt", model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"DFCKPT01"
    header = read_checkpoint_header(tmp_path / "m.ckpt")
    n = int.from_bytes(raw[8:16], "little")
    body = 16 + n
    assert len(raw) == body + sum(t["nbytes"] for t in header["tensors"])
    for t in header["tensors"]:
        assert set(t) == {"name", "dtype", "shape", "offset", "nbytes"}


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "x.ckpt")


# --------------------------------------------------------------------------- gradients


def tiny_m1_spec():
    return ModelSpec(
        variant="m1",
        backbones={"front": BackboneSpec("toy_conv", False, 3, 8)},
        sequence_length=2,
        history_stride=4,
        recurrent_hidden=4,
        decoder_dims=(6, 4),
        dropout=0.0,
        toy_width=4,
    )


def gradient_check(seed=0, step=1e-5):
    """Largest per-tensor relative error ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)."""
    spec = tiny_m1_spec()
    model = build_model(spec, seed=seed, dtype=torch.float64)
    model.eval()
    batch = toy_batch(spec, b=2, seed=seed, dtype=torch.float64)

    def objective():
        return loss(model(batch.images, batch.semantic), batch.targets)

    model.zero_grad()
    objective().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            analytic = p.grad.detach().clone().view(-1)
            numeric = torch.zeros_like(analytic)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = objective().item()
                flat[i] = old - step
                down = objective().item()
                flat[i] = old
                numeric[i] = (up - down) / (2 * step)
            denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
            worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


def test_gradient_check():
    assert gradient_check() < 1e-4


def test_gradient_check_spec_is_tiny():
    spec = tiny_m1_spec()
    assert spec.backbones["front"].feature_dim <= 8
