"""Synthetic shape segmentation datasets and their on-disk format.

Layout of a dataset directory::

    images/NNNN.ppm   binary P6, 8-bit RGB
    masks/NNNN.pgm    binary P5, pixel value = class id (0 = background)
    manifest.json     split lists, class counts, seed, config echo

Training images only ever contain base classes; validation images may
contain any class.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError

FORMAT_VERSION = 1
SHAPES = ("disc", "square", "triangle", "bar")

# Saturated, well separated hues; background lives in a low-saturation grey band.
_PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.85, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.15, 0.90],
        [0.55, 0.90, 0.15],
        [0.90, 0.45, 0.65],
        [0.10, 0.55, 0.45],
        [0.45, 0.30, 0.10],
    ]
)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    num_classes: int = 8
    num_folds: int = 4
    fold: int = 0
    n_train: int = 400
    n_val: int = 160
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 7
    max_size: int = 12
    noise_sigma: float = 0.04
    texture_amplitude: float = 0.15
    placement_retries: int = 200

    def validate(self) -> None:
        if self.image_size < 8 or self.image_size % 2:
            raise ConfigError("image_size must be an even number >= 8")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.num_folds < 2 or self.num_classes % self.num_folds:
            raise ConfigError("num_classes must split evenly into num_folds >= 2 folds")
        if not 0 <= self.fold < self.num_folds:
            raise ConfigError(f"fold {self.fold} outside [0, {self.num_folds})")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if not 3 <= self.min_size <= self.max_size < self.image_size:
            raise ConfigError("need 3 <= min_size <= max_size < image_size")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def novel_ids(self) -> list[int]:
        per = self.num_classes // self.num_folds
        return list(range(self.fold * per + 1, (self.fold + 1) * per + 1))

    @property
    def base_ids(self) -> list[int]:
        novel = set(self.novel_ids)
        return [c for c in range(1, self.num_classes + 1) if c not in novel]


def class_appearance(class_id: int) -> tuple[np.ndarray, float]:
    """Mean colour and stripe frequency (cycles per pixel) of a foreground class."""
    color = _PALETTE[class_id - 1]
    freq = 0.08 + 0.05 * ((class_id - 1) % 4)
    return color, freq


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) uint8
    manifest: dict = field(default_factory=dict)

    @property
    def base_ids(self) -> list[int]:
        return list(self.manifest["base_ids"])

    @property
    def novel_ids(self) -> list[int]:
        return list(self.manifest["novel_ids"])

    @property
    def train_idx(self) -> list[int]:
        return list(self.manifest["train"])

    @property
    def val_idx(self) -> list[int]:
        return list(self.manifest["val"])

    def __len__(self) -> int:
        return self.images.shape[0]

    def image_tensor(self, i: int) -> np.ndarray:
        """Normalised (3, H, W) float64 view of image ``i``."""
        return image_to_array(self.images[i])

    def images_with(self, class_id: int, indices) -> list[int]:
        return [int(i) for i in indices if np.any(self.masks[i] == class_id)]


def image_to_array(img: np.ndarray) -> np.ndarray:
    return ((img.astype(np.float64) / 255.0 - 0.5) / 0.25).transpose(2, 0, 1)


# -- generation -----------------------------------------------------------------

def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "disc":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "triangle":
        return xx >= (size - yy) / 2 - 0.5 if rng.random() < 0.5 else np.abs(xx - size / 2) <= yy / 2
    # bar: thin rectangle, horizontal or vertical
    m = np.zeros((size, size), dtype=bool)
    t = max(2, size // 3)
    lo = (size - t) // 2
    if rng.random() < 0.5:
        m[lo : lo + t, :] = True
    else:
        m[:, lo : lo + t] = True
    return m


def _render(cfg: SynthConfig, allowed: list[int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.image_size
    mask = np.zeros((s, s), dtype=np.uint8)
    base_grey = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = np.empty((s, s, 3))
    img[:] = base_grey + tint
    yy, xx = np.mgrid[0:s, 0:s]
    img += 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(0.02, 0.1) + yy * rng.uniform(0.02, 0.1)))[..., None]

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    n_shapes = min(n_shapes, len(allowed))
    classes = rng.choice(allowed, size=n_shapes, replace=False)
    occupied = np.zeros((s, s), dtype=bool)
    for cid in classes:
        for _ in range(cfg.placement_retries):
            size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            shape = _shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], size, rng)
            y0 = int(rng.integers(0, s - size + 1))
            x0 = int(rng.integers(0, s - size + 1))
            region = np.zeros((s, s), dtype=bool)
            region[y0 : y0 + size, x0 : x0 + size] = shape
            grown = region.copy()
            grown[1:] |= region[:-1]
            grown[:-1] |= region[1:]
            grown[:, 1:] |= grown[:, :-1].copy()
            grown[:, :-1] |= grown[:, 1:].copy()
            if not (grown & occupied).any():
                break
        else:
            raise GenerationError(f"could not place class {cid} after {cfg.placement_retries} tries")
        color, freq = class_appearance(int(cid))
        theta = rng.uniform(0, np.pi)
        stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        texture = color[None, None, :] * (1.0 + cfg.texture_amplitude * stripes[..., None])
        img[region] = texture[region]
        mask[region] = cid
        occupied |= region
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape) if cfg.noise_sigma > 0 else 0.0
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, mask


def _class_counts(masks: np.ndarray, indices, num_classes: int) -> dict[str, int]:
    counts = {str(c): 0 for c in range(1, num_classes + 1)}
    for i in indices:
        for c in np.unique(masks[i]):
            if c:
                counts[str(int(c))] += 1
    return counts


def generate_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    """Pure function of ``(cfg, seed)``; each image has its own RNG stream."""
    cfg.validate()
    n = cfg.n_train + cfg.n_val
    images = np.empty((n, cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    masks = np.empty((n, cfg.image_size, cfg.image_size), dtype=np.uint8)
    everything = list(range(1, cfg.num_classes + 1))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        allowed = cfg.base_ids if i < cfg.n_train else everything
        images[i], masks[i] = _render(cfg, allowed, rng)
    train = list(range(cfg.n_train))
    val = list(range(cfg.n_train, n))
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "config": asdict(cfg),
        "num_classes": cfg.num_classes,
        "base_ids": cfg.base_ids,
        "novel_ids": cfg.novel_ids,
        "train": train,
        "val": val,
        "class_counts": {
            "train": _class_counts(masks, train, cfg.num_classes),
            "val": _class_counts(masks, val, cfg.num_classes),
        },
    }
    return Dataset(images, masks, manifest)


# -- netpbm I/O -----------------------------------------------------------------

_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def write_pnm(path: Path, arr: np.ndarray) -> None:
    """P6 for (H, W, 3) uint8, P5 for (H, W) uint8 or uint16 (big-endian)."""
    if arr.ndim == 3:
        magic, maxval, payload = b"P6", 255, arr.astype(np.uint8).tobytes()
    elif arr.dtype == np.uint16:
        magic, maxval, payload = b"P5", 65535, arr.astype(">u2").tobytes()
    else:
        magic, maxval, payload = b"P5", 255, arr.astype(np.uint8).tobytes()
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval) + payload)


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: malformed netpbm header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * channels * dtype.itemsize
    body = raw[m.end() :]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, 3) if channels == 3 else (h, w))
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


# -- directory round trip ---------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_pnm(root / "images" / f"{i:04d}.ppm", ds.images[i])
        write_pnm(root / "masks" / f"{i:04d}.pgm", ds.masks[i])
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(f"{mpath}: missing manifest") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: {e}") from None
    for key in ("base_ids", "novel_ids", "train", "val", "num_classes"):
        if key not in manifest:
            raise FormatError(f"{mpath}: missing key {key!r}")
    n = len(manifest["train"]) + len(manifest["val"])
    images, masks = [], []
    for i in range(n):
        ipath = root / "images" / f"{i:04d}.ppm"
        kpath = root / "masks" / f"{i:04d}.pgm"
        if not ipath.exists() or not kpath.exists():
            raise FormatError(f"{ipath if not ipath.exists() else kpath}: missing file")
        img, mask = read_pnm(ipath), read_pnm(kpath)
        if img.ndim != 3:
            raise FormatError(f"{ipath}: expected an RGB (P6) image")
        if mask.ndim != 2 or mask.shape != img.shape[:2]:
            raise FormatError(f"{kpath}: mask shape {mask.shape} does not match image {img.shape[:2]}")
        if mask.max(initial=0) > manifest["num_classes"]:
            raise FormatError(f"{kpath}: class id {int(mask.max())} > num_classes")
        images.append(img)
        masks.append(mask.astype(np.uint8))
    return Dataset(np.stack(images), np.stack(masks), manifest)


def dataset_digest(path) -> str:
    """SHA-256 over sorted relative paths and file bytes."""
    root = Path(path)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode() + b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
