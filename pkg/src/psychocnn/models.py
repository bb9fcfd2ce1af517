"""Model zoo: AlexNet, VGG11/13/16 and FE-AlexNet, plus checkpoints.

All models share one layout so that layers can be addressed by dotted
name (``features.10``, ``classifier.excite`` ...)::

    features -> avgpool -> flatten -> classifier

The backbones come from torchvision so that published ImageNet weights load
without key remapping. FE-AlexNet keeps AlexNet's convolutional stack and
replaces the first two fully connected layers by a feature-excitation gate
followed by a single output layer.
"""

from __future__ import annotations

import copy
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn
from torchvision import models as tvm
from torchvision import transforms

ARCHITECTURES = ("alexnet", "vgg11", "vgg13", "vgg16", "fe_alexnet")
PROVENANCES = ("object_pretrained", "face_pretrained", "randomly_initialized")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HAPPY = 1  # class index of "positive" valence

MANIFEST = "manifest.json"
WEIGHTS = "weights.pt"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_size: int = 224
    num_classes: int = 2
    reduction: int = 4  # FE gate compression; ignored by other architectures

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.name!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.input_size < 32:
            raise ModelError("input_size must be >= 32")
        if self.feature_dim % self.reduction:
            raise ModelError(f"reduction {self.reduction} does not divide {self.feature_dim}")

    @property
    def alexnet_family(self) -> bool:
        return self.name in ("alexnet", "fe_alexnet")

    @property
    def feature_dim(self) -> int:
        # torchvision's adaptive pool yields 6x6 (AlexNet) or 7x7 (VGG) maps;
        # at 224 px this is exactly the last conv stage's own resolution.
        return 256 * 6 * 6 if self.alexnet_family else 512 * 7 * 7

    def to_dict(self) -> dict:
        return {"name": self.name, "input_size": [self.input_size, self.input_size, 3],
                "num_classes": self.num_classes, "reduction": self.reduction,
                "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        size = d.get("input_size", 224)
        if isinstance(size, (list, tuple)):
            if len(size) != 3 or size[0] != size[1] or size[2] != 3:
                raise ModelError(f"input_size must be square RGB, got {size}")
            size = size[0]
        return cls(d["name"], int(size), int(d.get("num_classes", 2)), int(d.get("reduction", 4)))


def fe_forward(x: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Feature excitation: ``x * sigmoid(W2 @ relu(W1 @ x))``.

    ``x`` is (..., d); ``w1`` is (d/r, d) and ``w2`` is (d, d/r), i.e. the
    usual (out, in) layout of a bias-free linear layer.
    """
    d = x.shape[-1]
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != d or w2.shape != (d, w1.shape[0]):
        raise ModelError(f"shape mismatch: x(..., {d}), W1{tuple(w1.shape)}, W2{tuple(w2.shape)}")
    return x * torch.sigmoid(F.linear(F.relu(F.linear(x, w1)), w2))


class FeatureExcitation(nn.Module):
    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        if dim % reduction:
            raise ModelError(f"reduction {reduction} does not divide {dim}")
        self.dim = dim
        self.reduction = reduction
        self.w1 = nn.Linear(dim, dim // reduction, bias=False)
        self.w2 = nn.Linear(dim // reduction, dim, bias=False)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.w2(F.relu(self.w1(x))))

    def forward(self, x):
        return fe_forward(x, self.w1.weight, self.w2.weight)


def fe_head(feature_dim: int, num_classes: int = 2, reduction: int = 4) -> nn.Sequential:
    """FE gate plus the output layer; no dropout."""
    return nn.Sequential(OrderedDict(
        excite=FeatureExcitation(feature_dim, reduction),
        fc=nn.Linear(feature_dim, num_classes),
    ))


class ZooModel(nn.Module):
    """features -> avgpool -> flatten -> classifier, with the spec attached."""

    def __init__(self, spec: ModelSpec, features: nn.Module, avgpool: nn.Module,
                 classifier: nn.Module):
        super().__init__()
        self.spec = spec
        self.features = features
        self.avgpool = avgpool
        self.classifier = classifier

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.avgpool(self.features(x)), 1)

    def forward(self, x):
        return self.classifier(self.embed(x))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            return F.softmax(self(x), dim=1)
        finally:
            self.train(was_training)

    def layer(self, name: str) -> nn.Module:
        try:
            return self.get_submodule(name)
        except AttributeError as exc:
            raise ModelError(f"no layer named {name!r}") from exc


def _no_inplace(module: nn.Module) -> None:
    # in-place ReLU would overwrite activations captured by attribution hooks
    for m in module.modules():
        if isinstance(m, nn.ReLU):
            m.inplace = False


def _he_init(module: nn.Module) -> None:
    # conv: fan_out as in torchvision's VGG; linear: fan_in
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        else:
            continue
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def _torchvision_backbone(name: str, num_classes: int) -> nn.Module:
    ctor = {"alexnet": tvm.alexnet, "fe_alexnet": tvm.alexnet, "vgg11": tvm.vgg11,
            "vgg13": tvm.vgg13, "vgg16": tvm.vgg16}[name]
    return ctor(weights=None, num_classes=num_classes)


def build_model(spec: ModelSpec, init: str = "random", checkpoint: "Checkpoint | None" = None,
                seed: int = 0) -> ZooModel:
    """Construct a model; He-normal init from ``seed`` or exact checkpoint weights."""
    if init not in ("random", "from_checkpoint"):
        raise ModelError(f"unknown init {init!r}")
    if init == "from_checkpoint":
        if checkpoint is None:
            raise ModelError("init='from_checkpoint' needs a checkpoint")
        if checkpoint.spec != spec:
            raise ModelError(f"checkpoint spec {checkpoint.spec} does not match {spec}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        tv = _torchvision_backbone(spec.name, spec.num_classes)
        if spec.name == "fe_alexnet":
            classifier = fe_head(spec.feature_dim, spec.num_classes, spec.reduction)
        else:
            classifier = tv.classifier
        model = ZooModel(spec, tv.features, tv.avgpool, classifier)
        _he_init(model)
    _no_inplace(model)
    if init == "from_checkpoint":
        try:
            model.load_state_dict(checkpoint.state_dict, strict=True)
        except RuntimeError as exc:
            raise ModelError(f"checkpoint does not fit {spec.name}: {exc}") from exc
    return model.eval()


def assemble_fe_alexnet(backbone: ZooModel, head: nn.Module | None = None,
                        reduction: int = 4, seed: int = 0) -> ZooModel:
    """FE-AlexNet that reuses (a copy of) an AlexNet-family conv stack."""
    if not backbone.spec.alexnet_family:
        raise ModelError(f"FE-AlexNet needs an AlexNet backbone, got {backbone.spec.name}")
    spec = ModelSpec("fe_alexnet", backbone.spec.input_size, backbone.spec.num_classes, reduction)
    if head is None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            head = fe_head(spec.feature_dim, spec.num_classes, reduction)
            _he_init(head)
    excite = head[0] if isinstance(head, nn.Sequential) else head
    if not isinstance(excite, FeatureExcitation) or excite.dim != spec.feature_dim:
        raise ModelError(f"head does not match feature_dim {spec.feature_dim}")
    out = head[-1]
    if not isinstance(out, nn.Linear) or out.out_features != spec.num_classes:
        raise ModelError("head must end in a linear layer with num_classes outputs")
    features = copy.deepcopy(backbone.features)
    model = ZooModel(spec, features, copy.deepcopy(backbone.avgpool), head)
    _no_inplace(model)
    return model.eval()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- checkpoints ---------------------------------------------------------

@dataclass
class Checkpoint:
    spec: ModelSpec
    state_dict: dict
    provenance: str = "randomly_initialized"
    metrics: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ModelError(f"unknown provenance {self.provenance!r}")

    def manifest(self) -> dict:
        return {"model": self.spec.name, "input_size": [self.spec.input_size] * 2 + [3],
                "num_classes": self.spec.num_classes, "reduction": self.spec.reduction,
                "feature_dim": self.spec.feature_dim, "provenance": self.provenance,
                "metrics": self.metrics, "seed": self.seed, "weights": WEIGHTS}


def make_checkpoint(model: ZooModel, provenance: str, metrics: dict | None = None,
                    seed: int | None = None) -> Checkpoint:
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return Checkpoint(model.spec, state, provenance, dict(metrics or {}), seed)


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.state_dict, directory / WEIGHTS)
    (directory / MANIFEST).write_text(json.dumps(ckpt.manifest(), indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise ModelError(f"no checkpoint manifest at {mpath}")
    man = json.loads(mpath.read_text())
    for key in ("model", "input_size", "num_classes", "provenance"):
        if key not in man:
            raise ModelError(f"{mpath}: manifest lacks {key!r}")
    spec = ModelSpec.from_dict({"name": man["model"], "input_size": man["input_size"],
                                "num_classes": man["num_classes"],
                                "reduction": man.get("reduction", 4)})
    state = torch.load(directory / man.get("weights", WEIGHTS), map_location="cpu",
                       weights_only=True)
    return Checkpoint(spec, state, man["provenance"], man.get("metrics", {}), man.get("seed"))


def transfer_init(spec: ModelSpec, source: Checkpoint, seed: int = 0) -> tuple[ZooModel, list[str]]:
    """New model for ``spec`` seeded from a pretrained checkpoint.

    Convolutional weights are always copied (the conv stacks must match);
    classifier tensors are copied only where names and shapes agree, so an
    ImageNet 1000-way output layer is re-initialised for the 2-way task.
    """
    model = build_model(spec, "random", seed=seed)
    own = model.state_dict()
    copied = []
    for k, v in source.state_dict.items():
        if k.startswith("features."):
            if k not in own or own[k].shape != v.shape:
                raise ModelError(f"conv tensor {k} of {source.spec.name} does not fit {spec.name}")
        elif k not in own or own[k].shape != v.shape:
            continue
        own[k] = v.clone()
        copied.append(k)
    if not any(k.startswith("features.") for k in copied):
        raise ModelError(f"no convolutional weights shared between {source.spec.name} and {spec.name}")
    model.load_state_dict(own)
    return model.eval(), copied


def torchvision_imagenet_checkpoint(name: str) -> Checkpoint:
    """Object-pretrained checkpoint from torchvision's ImageNet weights (downloads)."""
    if name not in ("alexnet", "vgg11", "vgg13", "vgg16"):
        raise ModelError(f"no torchvision ImageNet weights for {name!r}")
    ctor = getattr(tvm, name)
    tv = ctor(weights="IMAGENET1K_V1")
    spec = ModelSpec(name, 224, 1000)
    model = ZooModel(spec, tv.features, tv.avgpool, tv.classifier)
    return make_checkpoint(model, "object_pretrained", {"source": "torchvision IMAGENET1K_V1"})


# --- inference -----------------------------------------------------------

def eval_transform(input_size: int = 224):
    """Resize to 256/224 of the input size, centre-crop, ImageNet-normalise."""
    return transforms.Compose([
        transforms.Resize(round(input_size * 256 / 224)),
        transforms.CenterCrop(input_size),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def display_crop(image: np.ndarray, input_size: int = 224) -> np.ndarray:
    """The RGB pixels the network actually sees, before normalisation."""
    tf = transforms.Compose([transforms.Resize(round(input_size * 256 / 224)),
                             transforms.CenterCrop(input_size)])
    return np.asarray(tf(Image.fromarray(np.asarray(image, dtype=np.uint8))))


def to_batch(images, input_size: int = 224) -> torch.Tensor:
    tf = eval_transform(input_size)
    return torch.stack([tf(Image.fromarray(np.asarray(im, dtype=np.uint8)).convert("RGB"))
                        for im in images])


def classify_continuum(model: ZooModel, continuum, batch_size: int = 32,
                       device: str = "cpu") -> list[tuple[float, float]]:
    """(level, p_happy) for every stimulus, in continuum order."""
    if len(continuum.levels) == 0:
        raise ModelError("empty continuum")
    model = model.to(device)
    probs = []
    for i in range(0, len(continuum.images), batch_size):
        x = to_batch(continuum.images[i:i + batch_size], model.spec.input_size).to(device)
        probs.append(model.predict_proba(x)[:, HAPPY].cpu())
    p = torch.cat(probs).double().numpy()
    return [(float(lv), float(pv)) for lv, pv in zip(continuum.levels, p)]


def list_layers(model: ZooModel) -> list[str]:
    """Dotted names of layers with spatial (N, C, H, W) outputs."""
    names = [f"features.{n}" for n, m in model.features.named_children()
             if isinstance(m, (nn.Conv2d, nn.ReLU, nn.MaxPool2d))]
    return names + ["avgpool"]


def last_conv_layer(model: ZooModel) -> str:
    convs = [f"features.{n}" for n, m in model.features.named_children()
             if isinstance(m, nn.Conv2d)]
    if not convs:
        raise ModelError("model has no convolutional layer")
    return convs[-1]
