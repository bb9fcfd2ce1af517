import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from psychocnn.attribution import (Heatmap, cam_grid, layercam, layercam_from,
                                   render_overlay)
from psychocnn.models import ModelError, ModelSpec, build_model
from psychocnn.stimuli import synth_continuum


class Toy(nn.Module):
    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.features = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(),
                                      nn.Conv2d(4, 5, 3, padding=1), nn.ReLU())
        self.classifier = nn.Linear(5 * 8 * 8, 2)
        self.double()

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


def _conv_loops(x, w, b):
    # x (C, H, W), w (K, C, 3, 3), zero padding 1
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for k in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[k, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[k]) + b[k]
    return out


def _oracle(net, x, cls, pre_relu):
    p = {k: v.detach().numpy() for k, v in net.state_dict().items()}
    a1 = np.maximum(_conv_loops(x, p["features.0.weight"], p["features.0.bias"]), 0)
    z2 = _conv_loops(a1, p["features.2.weight"], p["features.2.bias"])
    a2 = np.maximum(z2, 0)
    # logit is linear in a2, so its gradient is the reshaped weight row
    g = p["classifier.weight"][cls].reshape(5, 8, 8)
    if pre_relu:
        g, act = g * (z2 > 0), z2
    else:
        act = a2
    return np.maximum((np.maximum(g, 0) * act).sum(0), 0)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("cls", [0, 1])
@pytest.mark.parametrize("layer,pre", [("features.3", False), ("features.2", True)])
def test_layercam_matches_loop_oracle(seed, cls, layer, pre):
    net = Toy(seed)
    x = np.random.default_rng(seed).normal(size=(3, 8, 8))
    hm = layercam(net, torch.tensor(x), cls, layer)
    assert hm.values.shape == (8, 8)
    assert np.allclose(hm.values, _oracle(net, x, cls, pre), atol=1e-10)


def test_default_layer_is_last_conv():
    net = Toy()
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    assert layercam(net, x, 1).layer_name == "features.2"


def test_hand_example():
    a = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    g = torch.tensor([[[-1.0, 0.5], [0.25, -2.0]]])
    assert torch.equal(layercam_from(a, g), torch.tensor([[0.0, 1.0], [0.75, 0.0]]))


def test_nonpositive_gradients_give_zero_map():
    a = torch.rand(6, 4, 4)
    assert torch.count_nonzero(layercam_from(a, -torch.rand(6, 4, 4))) == 0


def test_sign_cancellation():
    # opposite gradients select complementary channels
    a = torch.rand(3, 5, 5)
    g = torch.randn(3, 5, 5)
    both = layercam_from(a, g) + layercam_from(a, -g)
    assert torch.allclose(both, (g.abs() * a).sum(0), atol=1e-6)


def test_maps_leave_parameters_untouched():
    net = Toy(1)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net.train()
    layercam(net, torch.randn(3, 8, 8, dtype=torch.float64), 0)
    assert net.training
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())
    assert all(p.grad is None for p in net.parameters())


def test_layer_errors():
    net = Toy()
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    with pytest.raises(ModelError):
        layercam(net, x, 0, "features.9")
    with pytest.raises(ModelError):
        layercam(net, x, 2)
    with pytest.raises(ModelError):
        layercam(net, x, 0, "classifier")


def test_normalize():
    hm = Heatmap(np.array([[0.0, 2.0], [1.0, 4.0]]), "l", 1).normalize()
    assert hm.normalized and hm.values.max() == 1.0
    zero = Heatmap(np.zeros((2, 2)), "l", 1).normalize()
    assert np.all(zero.values == 0)


def test_overlay_alpha_extremes():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    hm = Heatmap(np.arange(16.0).reshape(4, 4), "l", 1)
    assert np.array_equal(render_overlay(hm, img, 0.0), img)
    full = render_overlay(hm, img, 1.0)
    assert full.shape == img.shape and not np.array_equal(full, img)
    half = render_overlay(hm, img, 0.5).astype(int)
    assert np.all(np.abs(half - (img.astype(int) + full) / 2) <= 1)
    with pytest.raises(ValueError):
        render_overlay(hm, img, 1.5)
    with pytest.raises(ValueError):
        render_overlay(hm, np.zeros((0, 4, 3), np.uint8))


def test_zero_heatmap_overlay_is_uniform_tint():
    img = np.full((8, 8, 3), 100, np.uint8)
    out = render_overlay(Heatmap(np.zeros((2, 2)), "l", 1), img, 0.5)
    assert np.all(out == out[0, 0])


@pytest.fixture(scope="module")
def tiny_models():
    return [(n, build_model(ModelSpec(n, input_size=64), seed=0))
            for n in ("alexnet", "vgg11", "vgg13", "fe_alexnet")]


@pytest.mark.parametrize("rows,cols", [(4, 5), (1, 1), (3, 3)])
def test_cam_grid_layouts(tmp_path, tiny_models, rows, cols):
    cont = synth_continuum(5, seed=0, size=72)
    stim = [(f"{lv:.0%}", im) for lv, im in zip(cont.levels, cont.images)][:cols]
    path = cam_grid(tiny_models[:rows], stim, tmp_path / "g.png")
    with Image.open(path) as im:
        w, h = im.size
    if cols > rows:
        assert w > h
    assert path.read_bytes() == cam_grid(tiny_models[:rows], stim, tmp_path / "h.png").read_bytes()


def test_cam_grid_rejects_mixed_sizes(tmp_path, tiny_models):
    a = np.zeros((64, 64, 3), np.uint8)
    b = np.zeros((70, 64, 3), np.uint8)
    with pytest.raises(ValueError):
        cam_grid(tiny_models[:1], [("a", a), ("b", b)], tmp_path / "x.png")


def test_real_model_map_shape():
    model = build_model(ModelSpec("alexnet", input_size=224), seed=0)
    img = synth_continuum(2, seed=0).images[1]
    hm = layercam(model, img, 1)
    assert hm.layer_name == "features.10" and hm.values.shape == (13, 13)
    assert np.all(hm.values >= 0)
