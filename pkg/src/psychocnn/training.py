"""Frozen-backbone transfer learning for binary valence classification."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from torchvision import transforms

from .models import (IMAGENET_MEAN, IMAGENET_STD, Checkpoint, ZooModel, eval_transform,
                     make_checkpoint)

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "PSYCHOCNN_DATA_ROOT"
VALENCE_CLASSES = {"negative": 0, "positive": 1}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class DatasetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def binarize_valence(v: float) -> int:
    """Negative valence -> 0, zero or positive -> 1."""
    v = float(v)
    if not math.isfinite(v):
        raise DatasetError(f"non-finite valence {v}")
    return VALENCE_CLASSES["negative"] if v < 0 else VALENCE_CLASSES["positive"]


@dataclass
class DatasetManifest:
    split: str
    entries: list[tuple[Path, int]]
    class_map: dict[str, int] = field(default_factory=lambda: dict(VALENCE_CLASSES))

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise DatasetError(f"split must be 'train' or 'val', got {self.split!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [lab for _, lab in self.entries]

    @property
    def num_classes(self) -> int:
        return len(self.class_map)


def _resolve(p: str, base: Path, root: str | Path | None) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    root = root if root is not None else os.environ.get(DATA_ROOT_ENV)
    return (Path(root) if root else base) / path


def load_manifest(source: str | Path, split: str = "train", root: str | Path | None = None,
                  class_map: dict[str, int] | None = None) -> DatasetManifest:
    """Read a ``path,valence`` / ``path,label`` CSV or a class-per-directory folder.

    Relative CSV paths resolve against ``root``, then ``$PSYCHOCNN_DATA_ROOT``,
    then the CSV's own directory. Valences are binarised on ingestion.
    """
    source = Path(source)
    if source.is_dir():
        return _load_folder(source, split, class_map)
    if not source.is_file():
        raise DatasetError(f"dataset not found: {source}")
    cmap = dict(class_map or VALENCE_CLASSES)
    entries = []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if "path" not in cols or not cols & {"valence", "label"}:
            raise DatasetError(f"{source}: header must be path,valence or path,label")
        for lineno, row in enumerate(reader, start=2):
            path = _resolve(row["path"], source.parent, root)
            try:
                if "valence" in cols:
                    label = binarize_valence(float(row["valence"]))
                else:
                    raw = row["label"].strip()
                    label = cmap[raw] if raw in cmap else int(raw)
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{source}:{lineno}: bad label: {exc}") from exc
            if label not in cmap.values():
                raise DatasetError(f"{source}:{lineno}: label {label} not in {cmap}")
            if not path.is_file():
                raise DatasetError(f"{source}:{lineno}: image not found: {path}")
            entries.append((path, label))
    return DatasetManifest(split, entries, cmap)


def _load_folder(directory: Path, split: str, class_map: dict[str, int] | None) -> DatasetManifest:
    classes = sorted(d.name for d in directory.iterdir() if d.is_dir())
    if not classes:
        raise DatasetError(f"{directory}: no class subdirectories")
    if class_map is None:
        class_map = (dict(VALENCE_CLASSES) if set(classes) == set(VALENCE_CLASSES)
                     else {c: i for i, c in enumerate(classes)})
    entries = []
    for c in classes:
        if c not in class_map:
            raise DatasetError(f"{directory}: class folder {c!r} not in class map")
        for p in sorted((directory / c).iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                entries.append((p, class_map[c]))
    return DatasetManifest(split, entries, dict(class_map))


def check_trainable(train: DatasetManifest) -> None:
    if not train.entries:
        raise DatasetError("training split is empty")
    if len(set(train.labels)) < 2:
        raise DatasetError("training split contains a single class")


class ImageDataset(Dataset):
    def __init__(self, manifest: DatasetManifest, transform):
        self.manifest = manifest
        self.transform = transform

    def __len__(self):
        return len(self.manifest.entries)

    def __getitem__(self, i):
        path, label = self.manifest.entries[i]
        try:
            with Image.open(path) as im:
                img = im.convert("RGB")
        except OSError as exc:
            raise DatasetError(f"cannot decode {path}: {exc}") from exc
        return self.transform(img), label


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 5e-5
    epochs: int = 20
    seed: int = 0
    freeze_backbone: bool = True
    random_crop: bool = True
    horizontal_flip: bool = True
    crop_scale: tuple[float, float] = (0.08, 1.0)
    optimizer: str = "adam"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.crop_scale = tuple(self.crop_scale)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    best_val_accuracy: float
    wall_clock_seconds: float
    config: dict
    census: dict

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock_seconds")
        return d


def train_transform(input_size: int, cfg: TrainConfig):
    steps = []
    if cfg.random_crop:
        steps.append(transforms.RandomResizedCrop(input_size, scale=cfg.crop_scale))
    else:
        steps += [transforms.Resize(round(input_size * 256 / 224)), transforms.CenterCrop(input_size)]
    if cfg.horizontal_flip:
        steps.append(transforms.RandomHorizontalFlip(0.5))
    steps += [transforms.ToTensor(), transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD)]
    return transforms.Compose(steps)


def freeze_features(model: ZooModel) -> dict:
    """Freeze the convolutional stack; return a parameter census."""
    for p in model.features.parameters():
        p.requires_grad_(False)
    for p in model.classifier.parameters():
        p.requires_grad_(True)
    return census(model)


def census(model: ZooModel) -> dict:
    frozen = [n for n, p in model.named_parameters() if not p.requires_grad]
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    params = dict(model.named_parameters())
    return {"frozen": sum(params[n].numel() for n in frozen),
            "trainable": sum(params[n].numel() for n in trainable),
            "frozen_tensors": frozen, "trainable_tensors": trainable}


def _logits(model: ZooModel, x: torch.Tensor, frozen: bool) -> torch.Tensor:
    if frozen:
        with torch.no_grad():
            feats = model.embed(x)
        return model.classifier(feats)
    return model(x)


@torch.no_grad()
def predict(model: ZooModel, data: DatasetManifest, batch_size: int = 64) -> np.ndarray:
    """Class probabilities per entry, no augmentation, dropout disabled."""
    if not data.entries:
        raise DatasetError("empty manifest")
    was_training = model.training
    model.eval()
    loader = DataLoader(ImageDataset(data, eval_transform(model.spec.input_size)),
                        batch_size=batch_size, shuffle=False)
    try:
        out = [F.softmax(model(x), dim=1) for x, _ in loader]
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()


def evaluate(model: ZooModel, data: DatasetManifest, batch_size: int = 64) -> float:
    probs = predict(model, data, batch_size)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(data.labels)))


@torch.no_grad()
def _embed_all(model: ZooModel, data: DatasetManifest, batch_size: int = 64):
    model.eval()
    loader = DataLoader(ImageDataset(data, eval_transform(model.spec.input_size)),
                        batch_size=batch_size, shuffle=False)
    feats = torch.cat([model.embed(x) for x, _ in loader])
    return feats, torch.tensor(data.labels)


def _shuffled(x: torch.Tensor, y: torch.Tensor, batch_size: int, gen: torch.Generator):
    order = torch.randperm(len(y), generator=gen)
    for i in range(0, len(y), batch_size):
        idx = order[i:i + batch_size]
        yield x[idx], y[idx]


@torch.no_grad()
def _head_accuracy(model: ZooModel, x: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    return float((model.classifier(x).argmax(1) == y).double().mean())


def train_head(model: ZooModel, train: DatasetManifest, val: DatasetManifest,
               cfg: TrainConfig | None = None,
               provenance: str = "randomly_initialized") -> tuple[Checkpoint, TrainReport]:
    """Cross-entropy training of the trainable parameters with Adam.

    Validation accuracy is measured after every epoch; the returned checkpoint
    holds the weights of the earliest epoch reaching the best accuracy. With a
    frozen backbone and augmentation off, embeddings are computed once.
    """
    cfg = cfg or TrainConfig()
    check_trainable(train)
    if not val.entries:
        raise DatasetError("validation split is empty")
    if cfg.freeze_backbone:
        info = freeze_features(model)
    else:
        for p in model.parameters():
            p.requires_grad_(True)
        info = census(model)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)

    start = time.perf_counter()
    cached = cfg.freeze_backbone and not cfg.random_crop and not cfg.horizontal_flip
    if cached:
        # frozen backbone + deterministic inputs: embed every image once
        xtr, ytr = _embed_all(model, train)
        xva, yva = _embed_all(model, val)
    else:
        loader = DataLoader(ImageDataset(train, train_transform(model.spec.input_size, cfg)),
                            batch_size=cfg.batch_size, shuffle=True, generator=gen)

    history, best_acc, best_epoch, best_state = [], -1.0, 0, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, count = 0.0, 0
        batches = _shuffled(xtr, ytr, cfg.batch_size, gen) if cached else loader
        for x, y in batches:
            logits = model.classifier(x) if cached else _logits(model, x, cfg.freeze_backbone)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            count += len(y)
        acc = _head_accuracy(model, xva, yva) if cached else evaluate(model, val)
        history.append(EpochRecord(epoch, total / count, acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / count, acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    report = TrainReport(history, best_epoch, best_acc, time.perf_counter() - start,
                         asdict(cfg), {k: info[k] for k in ("frozen", "trainable")})
    ckpt = make_checkpoint(model, provenance,
                           {"val_accuracy": best_acc, "best_epoch": best_epoch}, cfg.seed)
    return ckpt, report
