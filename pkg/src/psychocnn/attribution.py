"""LayerCAM attention maps, overlays and figure grids.

For a target class c and a spatial layer with activations A (K x H x W),
LayerCAM weighs every activation by its own rectified gradient::

    M[x, y] = relu( sum_k relu(d y_c / d A[k, x, y]) * A[k, x, y] )

where y_c is the pre-softmax score of class c.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from .models import ModelError, ZooModel, display_crop, last_conv_layer, to_batch  # noqa: E402

COLORMAP = "jet"


@dataclass
class Heatmap:
    values: np.ndarray
    layer_name: str
    target_class: int
    normalized: bool = False

    def normalize(self) -> "Heatmap":
        peak = float(self.values.max()) if self.values.size else 0.0
        vals = self.values / peak if peak > 0 else self.values.copy()
        return Heatmap(vals, self.layer_name, self.target_class, True)


def layercam_from(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """Combine (K, H, W) activations and gradients into an (H, W) map."""
    return F.relu((F.relu(gradients) * activations).sum(dim=0))


def layercam(model: torch.nn.Module, image, target_class: int, layer: str | None = None,
             input_size: int | None = None) -> Heatmap:
    """LayerCAM at ``layer`` (default: the last convolution) for one image.

    ``image`` is either an HxWx3 uint8 array, which is preprocessed for the
    model, or an already-normalised (3, H, W) / (1, 3, H, W) tensor.
    """
    if layer is None:
        layer = last_conv_layer(model)
    try:
        module = model.get_submodule(layer)
    except AttributeError as exc:
        raise ModelError(f"no layer named {layer!r}") from exc

    if isinstance(image, torch.Tensor):
        x = image if image.ndim == 4 else image.unsqueeze(0)
    else:
        size = input_size or model.spec.input_size
        x = to_batch([image], size)
    if x.shape[0] != 1:
        raise ModelError("layercam takes a single image")

    captured = {}

    def hook(_module, _inp, out):
        if not isinstance(out, torch.Tensor) or out.ndim != 4:
            raise ModelError(f"layer {layer!r} does not produce a spatial activation stack")
        captured["act"] = out
        out.register_hook(lambda g: captured.__setitem__("grad", g))

    was_training = model.training
    model.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            logits = model(x)
            if not 0 <= target_class < logits.shape[1]:
                raise ModelError(f"class index {target_class} out of range for {logits.shape[1]} classes")
            grads = torch.autograd.grad(logits[0, target_class], captured["act"],
                                        retain_graph=False, allow_unused=False)
    finally:
        handle.remove()
        model.train(was_training)
    act = captured["act"].detach()[0]
    cam = layercam_from(act, grads[0].detach()[0])
    return Heatmap(cam.double().numpy(), layer, target_class)


def colorize(values: np.ndarray, cmap: str = COLORMAP) -> np.ndarray:
    """Map [0, 1] values to uint8 RGB through a matplotlib colormap."""
    rgba = matplotlib.colormaps[cmap](np.clip(values, 0.0, 1.0))
    return np.floor(rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.as_tensor(values, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0, 0].numpy()


def render_overlay(heatmap: Heatmap, image: np.ndarray, alpha: float = 0.5,
                   cmap: str = COLORMAP) -> np.ndarray:
    """Blend the colour-mapped, upsampled heatmap over ``image``."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"cannot overlay on image of shape {img.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    hm = heatmap if heatmap.normalized else heatmap.normalize()
    colored = colorize(upsample(hm.values, img.shape[0], img.shape[1]), cmap)
    if alpha == 0.0:
        return img.copy()
    if alpha == 1.0:
        return colored
    out = (1.0 - alpha) * img[..., :3].astype(np.float64) + alpha * colored
    return np.floor(out + 0.5).astype(np.uint8)


def cam_grid(models: Sequence[tuple[str, ZooModel]], stimuli: Sequence[tuple[str, np.ndarray]],
             path: str | Path, layer: str | None = None, target_class: int = 1,
             alpha: float = 0.5, cell_inches: float = 1.6) -> Path:
    """Rows of models by columns of stimuli, each cell a LayerCAM overlay.

    ``layer`` defaults to each model's last convolution. Written as PNG
    without timestamp metadata so reruns are byte-stable.
    """
    if not models or not stimuli:
        raise ValueError("cam_grid needs at least one model and one stimulus")
    shapes = {np.asarray(im).shape for _, im in stimuli}
    if len(shapes) != 1:
        raise ValueError(f"stimuli differ in size: {sorted(shapes)}")
    sizes = {m.spec.input_size for _, m in models}
    if len(sizes) != 1:
        raise ValueError(f"models differ in input size: {sorted(sizes)}")

    rows, cols = len(models), len(stimuli)
    fig, axes = plt.subplots(rows, cols, figsize=(cell_inches * cols + 1.0, cell_inches * rows + 0.4),
                             squeeze=False)
    for r, (mlabel, model) in enumerate(models):
        for c, (slabel, img) in enumerate(stimuli):
            hm = layercam(model, img, target_class, layer)
            shown = display_crop(img, model.spec.input_size)
            ax = axes[r][c]
            ax.imshow(render_overlay(hm, shown, alpha))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(slabel, fontsize=9)
            if c == 0:
                ax.set_ylabel(mlabel, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
