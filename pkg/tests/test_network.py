import numpy as np
import pytest
import torch

from ichseg.loss import deep_supervision_loss
from ichseg.network import (NetworkConfig, Norm, ResBlock, build_model, encoder_stage_blocks, encoder_stage_filters,
                            forward, load_checkpoint, save_checkpoint)


def test_config_defaults_and_validation():
    cfg = NetworkConfig()
    assert cfg.stage_blocks == (2, 4, 4, 4, 4)
    assert cfg.stage_filters == [32, 64, 128, 256, 512]
    assert cfg.norm is Norm.INSTANCE
    with pytest.raises(ValueError):
        NetworkConfig(stage_blocks=(2, 4, 4, 4))
    with pytest.raises(ValueError):
        NetworkConfig(ds_levels=5)
    with pytest.raises(ValueError):
        NetworkConfig(init_filters=0)


def test_structure_matches_config():
    model = build_model(NetworkConfig(in_channels=9))
    assert encoder_stage_blocks(model) == [2, 4, 4, 4, 4]
    assert encoder_stage_filters(model) == [32, 64, 128, 256, 512]
    assert model.stem.in_channels == 9
    assert len(model.decoder) == 5
    assert all(isinstance(level.block, ResBlock) for level in model.decoder)
    assert all(h.kernel_size == (1, 1) for h in [model.head, *model.ds_heads])
    assert all(conv.kernel_size == (3, 3) for stage in model.encoder for b in stage.blocks
               for conv in (b.conv1, b.conv2))


@pytest.mark.parametrize("size", [(32, 32), (64, 96), (128, 64)])
def test_shape_chain_tiny(size):
    model = build_model(NetworkConfig(init_filters=4))
    outs = forward(model, torch.zeros(3, *size))
    assert [tuple(o.shape) for o in outs] == [(2, size[0] // 2 ** i, size[1] // 2 ** i) for i in range(4)]


def test_bottleneck_is_1_over_32():
    model = build_model(NetworkConfig(init_filters=4))
    feats = []
    model.encoder[-1].register_forward_hook(lambda m, i, o: feats.append(o.shape))
    forward(model, torch.zeros(3, 384, 384))
    assert tuple(feats[0][-2:]) == (12, 12)


def test_bad_spatial_size_and_channels():
    model = build_model(NetworkConfig(init_filters=4))
    with pytest.raises(ValueError):
        forward(model, torch.zeros(3, 48, 48))
    with pytest.raises(ValueError):
        forward(model, torch.zeros(9, 32, 32))


def test_batch_norm_variant_runs():
    model = build_model(NetworkConfig(init_filters=4, norm="batch"))
    outs = forward(model, torch.randn(2, 3, 32, 32), training=True)
    assert outs[0].shape == (2, 2, 32, 32)


def test_seeded_init_and_inference_determinism():
    a = build_model(NetworkConfig(init_filters=4), seed=3)
    b = build_model(NetworkConfig(init_filters=4), seed=3)
    x = torch.randn(3, 64, 64)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    torch.testing.assert_close(forward(a, x)[0], forward(a, x)[0], rtol=0, atol=0)
    torch.testing.assert_close(forward(a, x)[0], forward(b, x)[0], rtol=0, atol=0)


def test_softmax_sums_to_one():
    model = build_model(NetworkConfig(init_filters=4))
    probs = torch.softmax(forward(model, torch.randn(3, 64, 64))[0], dim=0)
    torch.testing.assert_close(probs.sum(0), torch.ones(64, 64), atol=1e-5, rtol=0)


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = build_model(NetworkConfig(in_channels=9, init_filters=4), seed=11)
    path = save_checkpoint(tmp_path / "m.pt", model, {"epoch": 3, "val_dice": 0.5},
                           {"kind": "combined"})
    loaded, info = load_checkpoint(path)
    assert info["metadata"]["epoch"] == 3 and info["strategy"] == {"kind": "combined"}
    assert loaded.cfg == model.cfg
    for (ka, va), (kb, vb) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    x = torch.randn(9, 32, 32)
    assert torch.equal(forward(model, x)[0], forward(loaded, x)[0])


def finite_difference_check(n_params=6, seed=0, eps=1e-6):
    """Relative errors between autograd and central differences on sampled scalars."""
    torch.manual_seed(seed)
    model = build_model(NetworkConfig(init_filters=4), seed=seed).double()
    model.train()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    y = torch.zeros(2, 32, 32, dtype=torch.long)
    y[:, 8:20, 10:22] = 1

    def total():
        return deep_supervision_loss(model(x), y)

    model.zero_grad()
    total().backward()
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.numel() > 1]
    errors = []
    for _ in range(n_params):
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        analytic = p.grad.view(-1)[i].item()
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = total().item()
            flat[i] = old - eps
            down = total().item()
            flat[i] = old
        numeric = (up - down) / (2 * eps)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return errors


def test_gradient_matches_finite_differences():
    errors = finite_difference_check()
    assert max(errors) <= 1e-2, errors
