import numpy as np
import pytest
import torch

from sslseg import models
from sslseg.unet_torch import UNetConfig


def _x(B=2, H=16, W=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, 1, H, W, generator=g)


def test_build_model_is_deterministic(tiny_config):
    a = models.build_model(tiny_config, rng_seed=3)
    b = models.build_model(tiny_config, rng_seed=3)
    c = models.build_model(tiny_config, rng_seed=4)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(),
                                          c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(),
                                                          c.state_dict().values()))
    assert a.head is None


def test_build_model_init_ranges(tiny_config):
    net = models.build_model(tiny_config)
    conv = net.encoder[0][0]
    bound = np.sqrt(6. / (1 * 3 * 3))
    assert conv.conv.weight.abs().max() <= bound
    assert torch.equal(conv.conv.bias, torch.zeros_like(conv.conv.bias))
    assert torch.equal(conv.gain, torch.ones_like(conv.gain))
    assert torch.equal(conv.shift, torch.zeros_like(conv.shift))


def test_invalid_config_names_field():
    with pytest.raises(ValueError, match="depth"):
        models.build_model(UNetConfig(depth=0))


@pytest.mark.parametrize("mode,shape", [("segmentation", (2, 2, 16, 16)),
                                        ("regression", (2, 1, 16, 16)),
                                        ("global", (2, 8)),
                                        ("local", (2, 8, 16, 16))])
def test_head_output_shapes(tiny_net, mode, shape):
    models.swap_heads(tiny_net, mode, seed=1)
    forward = {"segmentation": models.forward_segmentation,
               "regression": models.forward_reconstruction,
               "global": models.forward_global_embedding,
               "local": models.forward_local_embeddings}[mode]
    y = forward(tiny_net, _x())
    assert tuple(y.shape) == shape
    if mode in ("global", "local"):
        assert torch.allclose(y.norm(dim=1), torch.ones(()), atol=1e-5)


def test_forward_feature_levels(tiny_net, tiny_config):
    out = tiny_net(_x(H=32, W=32))
    assert [tuple(f.shape) for f in out.encoder_features] == [(2, 4, 32, 32), (2, 8, 16, 16)]
    assert tuple(out.bottleneck.shape) == (2, 16, 8, 8)
    assert tuple(out.decoder_features[0].shape) == (2, 4, 32, 32)
    assert out.head_output is None


def test_input_checks(tiny_net):
    with pytest.raises(ValueError, match="divisible"):
        tiny_net(torch.zeros(1, 1, 18, 16))
    with pytest.raises(ValueError, match="channels"):
        tiny_net(torch.zeros(1, 2, 16, 16))


def test_wrong_head_rejected(tiny_net):
    models.swap_heads(tiny_net, "regression")
    with pytest.raises(ValueError, match="segmentation head not attached"):
        models.forward_segmentation(tiny_net, _x())
    with pytest.raises(ValueError, match="unknown head mode"):
        models.swap_heads(tiny_net, "projection")


def test_swap_heads_keeps_backbone_bytes(tiny_net):
    models.swap_heads(tiny_net, "global", seed=0)
    before = tiny_net.backbone_state()
    for mode in ("local", "regression", "segmentation"):
        models.swap_heads(tiny_net, mode, seed=5)
        after = tiny_net.backbone_state()
        for k in before:
            assert before[k].numpy().tobytes() == after[k].numpy().tobytes(), k
    assert tiny_net.head_mode == "segmentation"
    assert not any(k.startswith("head.") for k in before)


def test_swap_heads_seeded(tiny_config):
    a = models.swap_heads(models.build_model(tiny_config), "segmentation", seed=2)
    b = models.swap_heads(models.build_model(tiny_config), "segmentation", seed=2)
    assert torch.equal(a.head.weight, b.head.weight)


def test_predict_labels(tiny_net):
    models.swap_heads(tiny_net, "segmentation")
    x = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    labels = models.predict_labels(tiny_net, x, batch_size=2)
    assert labels.shape == (3, 16, 16) and labels.dtype == np.int64
    assert set(np.unique(labels)) <= {0, 1}


def test_predict_labels_ties_go_to_lowest_class(tiny_net):
    models.swap_heads(tiny_net, "segmentation")
    with torch.no_grad():
        tiny_net.head.weight.zero_()
        tiny_net.head.bias.zero_()
    labels = models.predict_labels(tiny_net, np.zeros((1, 1, 16, 16), np.float32))
    assert (labels == 0).all()


def test_composite_gradient(tiny_config, float64, grad_error):
    config = UNetConfig(depth=1, base_channels=2, num_classes=2, global_embed_dim=4,
                        local_embed_dim=4, global_hidden_dim=4)
    net = models.swap_heads(models.build_model(config, rng_seed=1), "segmentation", seed=1)
    x = torch.rand(1, 1, 4, 4, generator=torch.Generator().manual_seed(0))
    name = "decoder.0.1.conv.weight"

    def loss(weight, image):
        out = torch.func.functional_call(net, {name: weight}, (image,))
        return (out.head_output**2).mean()

    assert grad_error(loss, [dict(net.named_parameters())[name].detach(), x]) < 1e-3


def test_local_head_gradient(float64, grad_error):
    config = UNetConfig(depth=2, base_channels=2, num_classes=2, global_embed_dim=4,
                        local_embed_dim=4, global_hidden_dim=4)
    net = models.swap_heads(models.build_model(config, rng_seed=2), "local", seed=2)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 1, 16, 16, generator=g)
    weights = torch.randn(1, 4, 16, 16, generator=g)
    loss = lambda image: (weights * models.forward_local_embeddings(net, image)).sum()
    assert grad_error(loss, [x]) < 1e-3


def test_save_and_load_model(tmp_path, tiny_net, tiny_config):
    models.swap_heads(tiny_net, "segmentation", seed=3)
    path = tmp_path / "m.ckpt"
    tiny_net.save_model(path)
    other = models.build_model(tiny_config, rng_seed=9)
    other.load_model(path)
    assert other.head_mode == "segmentation"
    for k, v in tiny_net.state_dict().items():
        assert torch.equal(v, other.state_dict()[k]), k
