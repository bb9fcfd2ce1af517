"""Stimulus continua and feature masking.

A continuum is an ordered set of face images indexed by morph level, the
proportion of "happiness" in [0, 1]. Continua come either from a directory
of user-supplied morphs named ``NAME_pctXXX.png`` or from the synthetic
cartoon-face generator below, which is a desk-scale benchmark and not a
reconstruction of any real face database.

Masking replaces a rectangular region (eyes, nose or mouth) with a flat
fill so that the contribution of that region to a classifier's decision
can be probed.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

REGIONS = ("eyes", "nose", "mouth")
DEFAULT_PATTERN = r"_pct(\d{3})\.png$"
PAPER_LEVELS_21 = tuple(round(0.05 * i, 6) for i in range(21))
HUMAN_LEVELS = (0.0, 0.2, 0.3, 0.5, 0.7, 0.8, 1.0)

# Synthetic face geometry, as fractions of the canvas side.
_HEAD = (0.5, 0.5, 0.32, 0.40)  # cx, cy, semi-axis x, semi-axis y
_EYES = ((0.37, 0.38), (0.63, 0.38))
_EYE_RADIUS = 0.045
_NOSE = (0.5, 0.46, 0.58, 0.035)  # cx, top, bottom, half-width at base
_MOUTH = (0.5, 0.70, 0.13)  # cx, cy, half-width
_MOUTH_MAX_BEND = 0.06
_MOUTH_HALF_THICKNESS = 0.012
# Every mouth pixel the generator can touch lies inside this box.
MOUTH_REGION = (0.33, 0.62, 0.67, 0.78)


class StimulusError(ValueError):
    pass


@dataclass
class MorphContinuum:
    levels: list[float]
    images: list[np.ndarray]
    source: str = "user_morphs"

    def __post_init__(self):
        if len(self.levels) != len(self.images):
            raise StimulusError("levels and images differ in length")
        if not self.levels:
            raise StimulusError("empty continuum")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise StimulusError("levels must be strictly increasing")
        if any(not 0.0 <= lv <= 1.0 for lv in self.levels):
            raise StimulusError("levels must lie in [0, 1]")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise StimulusError(f"images differ in dimensions: {sorted(shapes)}")
        if self.source not in ("user_morphs", "synthetic"):
            raise StimulusError(f"unknown source {self.source!r}")

    def __len__(self):
        return len(self.levels)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.images[0].shape

    def subset(self, levels: Sequence[float], atol: float = 1e-9) -> "MorphContinuum":
        """Pick the stimuli at the given levels (each must be present)."""
        idx = []
        for lv in levels:
            hits = [i for i, x in enumerate(self.levels) if abs(x - lv) <= atol]
            if not hits:
                raise StimulusError(f"level {lv} not in continuum")
            idx.append(hits[0])
        return MorphContinuum([self.levels[i] for i in idx],
                              [self.images[i] for i in idx], self.source)

    def map_images(self, fn) -> "MorphContinuum":
        return MorphContinuum(list(self.levels), [fn(im) for im in self.images], self.source)


@dataclass(frozen=True)
class MaskSpec:
    region: str
    box: tuple[float, float, float, float]
    fill: str | tuple[int, int, int] = "mean"

    def __post_init__(self):
        if self.region not in REGIONS:
            raise StimulusError(f"unknown region {self.region!r}; expected one of {REGIONS}")
        if len(self.box) != 4:
            raise StimulusError("box must be (x0, y0, x1, y1)")
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise StimulusError(f"invalid fractional box {self.box}")
        if isinstance(self.fill, str):
            if self.fill not in ("mean", "mean_gray", "black"):
                raise StimulusError(f"unknown fill {self.fill!r}")
        else:
            if len(self.fill) != 3 or any(not 0 <= int(c) <= 255 for c in self.fill):
                raise StimulusError(f"custom fill must be an RGB triple, got {self.fill!r}")

    def pixel_box(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Return (row0, row1, col0, col1), half-open, rounding half up."""
        x0, y0, x1, y1 = self.box
        return (_round_half_up(y0 * height), _round_half_up(y1 * height),
                _round_half_up(x0 * width), _round_half_up(x1 * width))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def load_mask_boxes(path: str | Path | None = None) -> dict[str, tuple[float, ...]]:
    """Region -> fractional box. Without ``path`` the shipped defaults are used."""
    if path is None:
        text = resources.files("psychocnn").joinpath("data/masks.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    boxes = {}
    for region, box in raw.items():
        MaskSpec(region, tuple(box))  # validates
        boxes[region] = tuple(float(v) for v in box)
    return boxes


def mask_spec(region: str, boxes: dict | None = None, fill="mean") -> MaskSpec:
    boxes = boxes or load_mask_boxes()
    if region not in boxes:
        raise StimulusError(f"no box configured for region {region!r}")
    return MaskSpec(region, tuple(boxes[region]), fill)


def apply_mask(image: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Return a copy of ``image`` with the box of ``spec`` flat-filled.

    The "mean" fills are computed from the pixels outside the box, which
    keeps the operation idempotent. Pixels outside the box are untouched.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise StimulusError(f"expected an HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    r0, r1, c0, c1 = spec.pixel_box(h, w)
    out = img.copy()
    if r1 <= r0 or c1 <= c0:
        return out

    if isinstance(spec.fill, str) and spec.fill.startswith("mean"):
        outside = np.ones((h, w), dtype=bool)
        outside[r0:r1, c0:c1] = False
        pool = img[outside] if outside.any() else img.reshape(-1, 3)
        mean = pool.astype(np.float64).mean(axis=0)
        if spec.fill == "mean_gray":
            mean = np.full(3, mean.mean())
        color = np.floor(mean + 0.5)
    elif spec.fill == "black":
        color = np.zeros(3)
    else:
        color = np.asarray(spec.fill, dtype=np.float64)
    out[r0:r1, c0:c1] = color.astype(img.dtype)
    return out


def _percent(level: float) -> int:
    pct = level * 100.0
    if abs(pct - round(pct)) > 1e-6:
        raise StimulusError(f"level {level} is not a whole percent; cannot encode as pctXXX")
    return int(round(pct))


def save_continuum(continuum: MorphContinuum, directory: str | Path, name: str = "face") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for level, img in zip(continuum.levels, continuum.images):
        p = directory / f"{name}_pct{_percent(level):03d}.png"
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(p)
        paths.append(p)
    return paths


def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise StimulusError(f"cannot decode image {path}: {exc}") from exc


def load_continuum(directory: str | Path, level_pattern: str = DEFAULT_PATTERN,
                   expected_levels: Sequence[float] | None = None) -> MorphContinuum:
    """Load a continuum from files whose names encode the morph percentage.

    ``level_pattern`` is a regex searched in each ``.png`` filename; its first
    group is the integer percent of happiness.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise StimulusError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise StimulusError(f"no PNG files in {directory}")
    rx = re.compile(level_pattern)
    by_level: dict[float, Path] = {}
    for p in files:
        m = rx.search(p.name)
        if m is None:
            raise StimulusError(f"cannot parse morph level from {p.name!r}")
        level = int(m.group(1)) / 100.0
        if level in by_level:
            raise StimulusError(f"duplicate level {level} ({by_level[level].name}, {p.name})")
        by_level[level] = p
    if expected_levels is not None:
        missing = [lv for lv in expected_levels
                   if not any(abs(lv - x) < 1e-9 for x in by_level)]
        if missing:
            raise StimulusError(f"missing levels: {missing}")
    levels = sorted(by_level)
    images = [read_rgb(by_level[lv]) for lv in levels]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise StimulusError(f"images differ in dimensions: {sorted(shapes)}")
    return MorphContinuum(levels, images, "user_morphs")


# --- synthetic faces -----------------------------------------------------

@dataclass
class FaceIdentity:
    skin: tuple[float, float, float] = (0.93, 0.78, 0.64)
    background: tuple[float, float, float] = (0.55, 0.6, 0.65)
    features: tuple[float, float, float] = (0.15, 0.1, 0.1)
    lips: tuple[float, float, float] = (0.55, 0.12, 0.15)
    shift: tuple[float, float] = (0.0, 0.0)  # fractional translation of the whole face
    noise: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def random(cls, rng: np.random.Generator, jitter_geometry: bool = False,
               noise: float = 0.0) -> "FaceIdentity":
        def tone(base, spread):
            return tuple(float(np.clip(b + rng.uniform(-spread, spread), 0, 1)) for b in base)
        shift = tuple(rng.uniform(-0.03, 0.03, size=2)) if jitter_geometry else (0.0, 0.0)
        return cls(skin=tone(cls.skin, 0.08), background=tone(cls.background, 0.15),
                   features=tone(cls.features, 0.05), lips=tone(cls.lips, 0.08),
                   shift=(float(shift[0]), float(shift[1])), noise=noise)


def mouth_bend(level: float) -> float:
    """Signed mouth curvature: negative is a frown, zero straight, positive a smile."""
    return (2.0 * level - 1.0) * _MOUTH_MAX_BEND


def _blend(canvas, alpha, color):
    canvas *= (1.0 - alpha)[..., None]
    canvas += alpha[..., None] * np.asarray(color)[None, None, :]


def render_face(level: float, size: int = 224, identity: FaceIdentity | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one cartoon face as an HxWx3 uint8 array."""
    if not 0.0 <= level <= 1.0:
        raise StimulusError(f"level {level} outside [0, 1]")
    ident = identity or FaceIdentity()
    s = float(size)
    dx, dy = ident.shift
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    xf = xx / s - dx
    yf = yy / s - dy
    px = 1.0 / s  # one pixel in fractional units, used for edge softening

    canvas = np.empty((size, size, 3))
    canvas[:] = ident.background

    cx, cy, ax, ay = _HEAD
    r = np.sqrt(((xf - cx) / ax) ** 2 + ((yf - cy) / ay) ** 2)
    _blend(canvas, np.clip((1.0 - r) / (px / min(ax, ay)) + 0.5, 0, 1), ident.skin)

    for ex, ey in _EYES:
        d = np.hypot(xf - ex, yf - ey)
        _blend(canvas, np.clip((_EYE_RADIUS - d) / px + 0.5, 0, 1), ident.features)

    ncx, ntop, nbot, nhw = _NOSE
    t = np.clip((yf - ntop) / (nbot - ntop), 0, 1)
    inside = (yf >= ntop) & (yf <= nbot)
    half = nhw * t
    nose_alpha = np.clip((half - np.abs(xf - ncx)) / px + 0.5, 0, 1) * inside
    _blend(canvas, nose_alpha * 0.6, ident.features)

    mcx, mcy, mhw = _MOUTH
    u = (xf - mcx) / mhw
    bend = mouth_bend(level)
    # smile: corners above the centre (image y grows downwards)
    curve = mcy + bend * (0.5 - u ** 2)
    along = np.clip((1.0 - np.abs(u)) * mhw / px + 0.5, 0, 1)
    across = np.clip((_MOUTH_HALF_THICKNESS - np.abs(yf - curve)) / px + 0.5, 0, 1)
    _blend(canvas, along * across, ident.lips)

    if ident.noise > 0:
        gen = rng if rng is not None else np.random.default_rng(0)
        canvas += gen.normal(0.0, ident.noise, size=canvas.shape)
    return np.clip(np.floor(canvas * 255.0 + 0.5), 0, 255).astype(np.uint8)


def synth_continuum(n_levels: int = 21, seed: int = 0, size: int = 224) -> MorphContinuum:
    """Synthetic frown-to-smile continuum for one seeded identity.

    Only the mouth changes across levels; everything else is pixel-identical.
    """
    if n_levels < 2:
        raise StimulusError("n_levels must be >= 2")
    ident = FaceIdentity.random(np.random.default_rng(seed))
    levels = [round(i / (n_levels - 1), 6) for i in range(n_levels)]
    return MorphContinuum(levels, [render_face(lv, size, ident) for lv in levels], "synthetic")


def synth_faces(n: int, seed: int = 0, size: int = 224,
                noise: float = 0.02) -> list[tuple[np.ndarray, float]]:
    """Labelled training faces: random identities, small translations, uniform levels.

    Returns ``(image, valence)`` pairs with valence = 2 * level - 1 in [-1, 1].
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ident = FaceIdentity.random(rng, jitter_geometry=True, noise=noise)
        level = float(rng.uniform(0.0, 1.0))
        out.append((render_face(level, size, ident, rng), 2.0 * level - 1.0))
    return out


def write_face_dataset(pairs, directory: str | Path, name: str = "manifest.csv") -> Path:
    """Write images plus a ``path,valence`` CSV (paths relative to the CSV)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = ["path,valence"]
    for i, (img, valence) in enumerate(pairs):
        rel = f"images/{i:05d}.png"
        Image.fromarray(img).save(directory / rel)
        lines.append(f"{rel},{valence:.6f}")
    csv_path = directory / name
    csv_path.write_text("\n".join(lines) + "\n")
    return csv_path
