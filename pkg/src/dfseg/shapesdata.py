"""ShapesSeg: a seeded synthetic segmentation dataset.

Class 0 is background. Each foreground class has its own shape kind and a
base color, so appearance determines the label. The "true" dataset draws all
classes with an imbalanced frequency profile. The "proxy" dataset drops some
classes entirely and is used without labels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .checkpoint import atomic_write_bytes, atomic_write_text, dump_json
from .errors import InvalidConfigError, InvalidInputError, InvalidSpecError

SHAPE_KINDS = ("circle", "square", "triangle", "horizontal_stripe", "vertical_stripe")

# class id -> (kind, base RGB in [-1, 1]); class 0 is background
CLASS_STYLE = {
    1: ("circle", (0.85, -0.6, -0.6)),
    2: ("square", (-0.6, 0.8, -0.6)),
    3: ("triangle", (-0.6, -0.5, 0.85)),
    4: ("horizontal_stripe", (0.85, 0.8, -0.7)),
    5: ("vertical_stripe", (0.8, -0.6, 0.85)),
}
BACKGROUND_RGB = (-0.35, -0.35, -0.35)
TRUE_FREQUENCY = (0.9, 0.7, 0.5, 0.2, 0.05)
PROXY_FREQUENCY = (0.8, 0.8, 0.8, 0.2, 0.05)
PROXY_DROPPED = (4, 5)


@dataclass(frozen=True)
class Shape:
    class_id: int
    kind: str
    position: tuple[float, float]  # (row, col) of the center, in pixels
    scale: float  # radius / half-extent, in pixels
    fill_color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int]
    shapes: tuple[Shape, ...] = ()
    background_color: tuple[float, float, float] = BACKGROUND_RGB
    noise_seed: int | None = None
    noise_std: float = 0.0


@dataclass
class LabeledSample:
    image: np.ndarray  # 3 x H x W float32 in [-1, 1]
    labels: np.ndarray  # H x W uint8


def shape_mask(shape: Shape, image_size: tuple[int, int]) -> np.ndarray:
    """Boolean coverage mask, tested at pixel centers. Off-canvas parts are clipped."""
    if shape.kind not in SHAPE_KINDS:
        raise InvalidSpecError(f"unknown shape kind {shape.kind!r}")
    if not shape.scale > 0:
        raise InvalidSpecError(f"shape scale must be positive, got {shape.scale}")
    h, w = image_size
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    cy, cx = shape.position
    s = shape.scale
    dy, dx = rows - cy, cols - cx
    if shape.kind == "circle":
        m = dy ** 2 + dx ** 2 <= s ** 2
    elif shape.kind == "square":
        m = (np.abs(dy) <= s) & (np.abs(dx) <= s)
    elif shape.kind == "triangle":
        # apex at the top, base of width 2s at the bottom
        m = (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2)
    elif shape.kind == "horizontal_stripe":
        m = np.broadcast_to(np.abs(dy) <= s, (h, w))
    else:
        m = np.broadcast_to(np.abs(dx) <= s, (h, w))
    return np.ascontiguousarray(m)


def render_scene(spec: SceneSpec) -> LabeledSample:
    """Rasterize a scene; later shapes occlude earlier ones."""
    h, w = spec.image_size
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = np.asarray(spec.background_color, dtype=np.float64)[:, None, None]
    labels = np.zeros((h, w), dtype=np.uint8)
    for shape in spec.shapes:
        if shape.class_id < 1:
            raise InvalidSpecError("class 0 is reserved for background")
        m = shape_mask(shape, spec.image_size)
        labels[m] = shape.class_id
        image[:, m] = np.asarray(shape.fill_color, dtype=np.float64)[:, None]
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.noise_seed)
        image += rng.normal(0.0, spec.noise_std, size=image.shape)
    np.clip(image, -1.0, 1.0, out=image)
    return LabeledSample(image.astype(np.float32), labels)


@dataclass
class DatasetConfig:
    n_images: int = 1000
    num_classes: int = 6
    class_frequency: tuple[float, ...] = TRUE_FREQUENCY
    dropped_classes: tuple[int, ...] = ()
    seed: int = 0
    image_size: tuple[int, int] = (32, 32)
    color_jitter: float = 0.12
    noise_std: float = 0.04

    def __post_init__(self):
        self.class_frequency = tuple(float(f) for f in self.class_frequency)
        self.dropped_classes = tuple(sorted(int(c) for c in self.dropped_classes))
        self.image_size = tuple(int(v) for v in self.image_size)
        k = self.num_classes
        if self.n_images < 0:
            raise InvalidConfigError("n_images must be >= 0")
        if k < 2 or k - 1 > len(CLASS_STYLE):
            raise InvalidConfigError(f"num_classes must be in [2, {len(CLASS_STYLE) + 1}]")
        if len(self.class_frequency) != k - 1:
            raise InvalidConfigError(f"class_frequency needs {k - 1} entries, got {len(self.class_frequency)}")
        if any(not 0 < f <= 1 for f in self.class_frequency):
            raise InvalidConfigError("class_frequency entries must lie in (0, 1]")
        if any(not 1 <= c < k for c in self.dropped_classes):
            raise InvalidConfigError(f"dropped_classes must be a subset of 1..{k - 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("class_frequency", "dropped_classes", "image_size"):
            d[key] = list(d[key])
        return d


def true_config(n_images: int, seed: int, **kw) -> DatasetConfig:
    return DatasetConfig(n_images=n_images, seed=seed, **kw)


def proxy_config(n_images: int, seed: int, **kw) -> DatasetConfig:
    kw.setdefault("class_frequency", PROXY_FREQUENCY)
    kw.setdefault("dropped_classes", PROXY_DROPPED)
    return DatasetConfig(n_images=n_images, seed=seed, **kw)


def sample_scene(config: DatasetConfig, rng: np.random.Generator) -> SceneSpec:
    h, w = config.image_size
    side = min(h, w)
    present = [c for c in range(1, config.num_classes)
               if c not in config.dropped_classes and rng.random() < config.class_frequency[c - 1]]
    shapes = []
    for c in present:
        kind, base = CLASS_STYLE[c]
        color = tuple(float(v) for v in np.clip(np.asarray(base) + rng.uniform(-config.color_jitter, config.color_jitter, 3), -1, 1))
        if kind.endswith("stripe"):
            scale = float(rng.uniform(0.06, 0.1) * side)
        else:
            scale = float(rng.uniform(0.12, 0.22) * side)
        position = (float(rng.uniform(0.15 * h, 0.85 * h)), float(rng.uniform(0.15 * w, 0.85 * w)))
        shapes.append(Shape(c, kind, position, scale, color))
    # stripes span the canvas, so draw them first and let compact shapes sit on top
    stripes = [s for s in shapes if s.kind.endswith("stripe")]
    compact = [s for s in shapes if not s.kind.endswith("stripe")]
    order = rng.permutation(len(compact))
    shapes = stripes + [compact[i] for i in order]
    background = tuple(float(v) for v in np.asarray(BACKGROUND_RGB) + rng.uniform(-0.15, 0.15, 3))
    return SceneSpec(
        image_size=config.image_size,
        shapes=tuple(shapes),
        background_color=background,
        noise_seed=int(rng.integers(2 ** 32)),
        noise_std=config.noise_std,
    )


class SegDataset:
    """Images (N x 3 x H x W float32) with optional label maps (N x H x W uint8)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray | None, num_classes: int, config: DatasetConfig | None = None):
        self.images = images
        self._labels = labels
        self.num_classes = num_classes
        self.config = config

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise InvalidInputError("this dataset carries no labels")
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def without_labels(self) -> "SegDataset":
        return SegDataset(self.images, None, self.num_classes, self.config)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.images[i], self.labels[i])


def generate_dataset(config: DatasetConfig) -> SegDataset:
    """Render ``config.n_images`` scenes; sample i depends only on (seed, i)."""
    h, w = config.image_size
    images = np.empty((config.n_images, 3, h, w), dtype=np.float32)
    labels = np.empty((config.n_images, h, w), dtype=np.uint8)
    for i in range(config.n_images):
        rng = np.random.default_rng([int(config.seed), i])
        sample = render_scene(sample_scene(config, rng))
        images[i] = sample.image
        labels[i] = sample.labels
    return SegDataset(images, labels, config.num_classes, config)


def class_pixel_histogram(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InvalidInputError("cannot histogram an empty label collection")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError(f"labels outside [0, {num_classes})")
    counts = np.bincount(labels.reshape(-1).astype(np.int64), minlength=num_classes)
    return counts / counts.sum()


def image_class_frequency(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of images in which each class occupies at least one pixel."""
    present = np.stack([(labels == c).any(axis=(1, 2)) for c in range(num_classes)], axis=1)
    return present.mean(axis=0)


def batch_iterator(dataset: SegDataset, batch_size: int, shuffle_seed: int | None = None,
                   with_labels: bool = True, epoch: int = 0) -> Iterator:
    """Yield image tensors (and label tensors when ``with_labels``) covering the set once.

    ``shuffle_seed=None`` keeps index order; otherwise the permutation depends
    on (shuffle_seed, epoch) only.
    """
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = torch.from_numpy(dataset.images[idx])
        if with_labels:
            yield images, torch.from_numpy(dataset.labels[idx].astype(np.int64))
        else:
            yield images


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)


def write_ppm(path: Path, image: np.ndarray) -> None:
    _, h, w = image.shape
    body = _to_u8(image).transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + body)


def write_pgm(path: Path, labels: np.ndarray) -> None:
    h, w = labels.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + labels.astype(np.uint8).tobytes())


def _read_netpbm(path: Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise InvalidInputError(f"{path} is not a {magic.decode()} file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:], dtype=np.uint8), h, w


def read_ppm(path: Path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P6")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 127.5) - 1.0


def read_pgm(path: Path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P5")
    return raw.reshape(h, w).copy()


def dump_dataset(dataset: SegDataset, out_dir, name: str, with_labels: bool = True) -> Path:
    """Write PPM images, PGM labels and ``index.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    files = []
    for i in range(len(dataset)):
        entry = {"image": f"images/{i:05d}.ppm"}
        write_ppm(out_dir / entry["image"], dataset.images[i])
        if with_labels:
            entry["labels"] = f"labels/{i:05d}.pgm"
            write_pgm(out_dir / entry["labels"], dataset.labels[i])
        files.append(entry)
    index = {
        "name": name,
        "num_classes": dataset.num_classes,
        "config": dataset.config.to_dict() if dataset.config else None,
        "seed": dataset.config.seed if dataset.config else None,
        "files": files,
    }
    atomic_write_text(out_dir / "index.json", dump_json(index))
    return out_dir / "index.json"


def load_dataset_dump(out_dir) -> SegDataset:
    out_dir = Path(out_dir)
    index = json.loads((out_dir / "index.json").read_text())
    files = index["files"]
    images = np.stack([read_ppm(out_dir / f["image"]) for f in files]) if files else np.empty((0, 3, 0, 0), np.float32)
    labels = None
    if files and all("labels" in f for f in files):
        labels = np.stack([read_pgm(out_dir / f["labels"]) for f in files])
    return SegDataset(images, labels, index["num_classes"], None)
