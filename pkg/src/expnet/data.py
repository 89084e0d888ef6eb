"""Synthetic datasets isolating three expert-level cues, plus on-disk I/O.

* ``detail``: one shared background texture and a tiny class glyph at a
  random position.  Only the glyph carries the label.
* ``structure``: two concentric filled ellipses.  The label is the bucket of
  the inner/outer vertical radius ratio; position and absolute scale are
  random.
* ``interaction``: texture family x glyph identity.  The label is the pair,
  so neither cue alone determines it.

Directory layout::

    manifest.txt    header ``key=value`` lines, then one line per sample:
                    ``<image path> <label> [x0 y0 x1 y1 | <mask path>] sha256:<hex>``
    images/*.expt   (H, W, 3) float32 tensor files
    masks/*.expt    (H, W, 2) outer/inner masks (structure regime only)
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .model import ConfigError, coerce_fields, format_key_values, parse_key_values
from .serialize import TensorFileError, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes

REGIMES = ("detail", "structure", "interaction")
GLYPH_SIZE = 6
GLYPH_INK = 18
MAX_GLYPHS = 16
TEXTURE_AMPLITUDE = 0.3
RATIO_RANGE = (0.3, 0.9)
# fraction of each ratio bucket actually sampled, centred; the rest is a class gap
RATIO_FILL = 0.6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    regime: str = "detail"
    num_classes: int = 4
    per_class: int = 100
    image_size: int = 64
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.per_class < 1 or self.image_size < 2 * GLYPH_SIZE or self.noise < 0:
            raise ConfigError("per_class, image_size and noise out of range")

    @classmethod
    def from_text(cls, text: str, source: str = "<data spec>") -> "SyntheticSpec":
        return cls(**coerce_fields(cls, parse_key_values(text, source), source))

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        return format_key_values(self)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    regime: str
    boxes: Optional[np.ndarray] = None  # (N, 4) x0 y0 x1 y1, detail/interaction
    masks: Optional[np.ndarray] = None  # (N, H, W, 2) outer/inner, structure
    paths: List[str] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.labels[index],
            self.num_classes,
            self.regime,
            None if self.boxes is None else self.boxes[index],
            None if self.masks is None else self.masks[index],
            [self.paths[i] for i in index] if self.paths else [],
            self.seed,
        )


def split_dataset(data: Dataset, seed: int, train_fraction: float = 0.8) -> Tuple[Dataset, Dataset]:
    """Seeded permutation split into (train, test)."""
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_fraction * len(data)))
    return data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:]))


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def glyph_library(count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct 6x6 binary glyphs with equal ink."""
    if count > MAX_GLYPHS:
        raise DatasetError(f"{count} classes need more than the {MAX_GLYPHS} available glyphs")
    glyphs: List[np.ndarray] = []
    while len(glyphs) < count:
        flat = np.zeros(GLYPH_SIZE * GLYPH_SIZE, dtype=bool)
        flat[rng.choice(flat.size, GLYPH_INK, replace=False)] = True
        g = flat.reshape(GLYPH_SIZE, GLYPH_SIZE)
        # keep glyphs well apart in Hamming distance
        if all(np.sum(g != other) >= 12 for other in glyphs):
            glyphs.append(g)
    return np.stack(glyphs)


def smooth_texture(rng: np.random.Generator, size: int, sigma: float = 2.0) -> np.ndarray:
    raw = rng.normal(size=(size, size, 3))
    smooth = ndimage.gaussian_filter(raw, sigma=(sigma, sigma, 0), mode="wrap")
    smooth /= np.abs(smooth).max()
    return TEXTURE_AMPLITUDE * smooth


def stripe_texture(family: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented stripe family with a random phase."""
    angle = np.pi * family / 4.0 + (np.pi / 8.0 if family >= 4 else 0.0)
    period = 6.0 + 2.0 * (family % 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    tint = np.array([1.0, 0.6 + 0.1 * (family % 3), 0.4])
    return TEXTURE_AMPLITUDE * wave[..., None] * tint


def place_glyph(image: np.ndarray, glyph: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = image.shape[0]
    y0 = int(rng.integers(0, size - GLYPH_SIZE + 1))
    x0 = int(rng.integers(0, size - GLYPH_SIZE + 1))
    image[y0 : y0 + GLYPH_SIZE, x0 : x0 + GLYPH_SIZE, :] = np.where(glyph, 1.0, -1.0)[..., None]
    return np.array([x0, y0, x0 + GLYPH_SIZE, y0 + GLYPH_SIZE])


def ellipse_coverage(size: int, cy: float, cx: float, ry: float, rx: float,
                     supersample: int = 4) -> np.ndarray:
    """Fraction of each pixel inside the ellipse (sub-pixel sampled)."""
    offs = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    xs = ys
    inside = ((ys[:, None] - cy) / ry) ** 2 + ((xs[None, :] - cx) / rx) ** 2 <= 1.0
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def ratio_for_class(label: int, k: int, rng: np.random.Generator) -> float:
    lo, hi = RATIO_RANGE
    width = (hi - lo) / k
    centre = lo + (label + 0.5) * width
    return float(rng.uniform(centre - 0.5 * RATIO_FILL * width, centre + 0.5 * RATIO_FILL * width))


def render_structure(label: int, k: int, size: int, rng: np.random.Generator):
    ratio = ratio_for_class(label, k, rng)
    ry = rng.uniform(0.2, 0.4) * size
    rx = ry * rng.uniform(0.8, 1.0)
    cy = rng.uniform(ry + 1, size - ry - 1)
    cx = rng.uniform(rx + 1, size - rx - 1)
    outer = ellipse_coverage(size, cy, cx, ry, rx)
    inner = ellipse_coverage(size, cy, cx, ratio * ry, ratio * rx)
    image = np.empty((size, size, 3))
    image[...] = -0.5
    image += outer[..., None] * np.array([1.0, 0.5, 0.2])
    image += inner[..., None] * np.array([0.4, 0.8, 0.9])
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    outer_mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    inner_mask = ((yy - cy) / (ratio * ry)) ** 2 + ((xx - cx) / (ratio * rx)) ** 2 <= 1.0
    return image, np.stack([outer_mask, inner_mask], axis=-1).astype(np.float32)


def interaction_factors(k: int) -> Tuple[int, int]:
    """(texture families, glyphs) with both >= 2 and product k."""
    for t in range(2, k):
        if k % t == 0 and k // t >= 2:
            return t, k // t
    raise DatasetError(f"interaction regime needs a composite class count, got {k}")


def render_dataset(spec: SyntheticSpec) -> Dataset:
    """Build the dataset in memory; deterministic in ``spec``."""
    rng = np.random.default_rng(spec.seed)
    k, size = spec.num_classes, spec.image_size
    labels = np.repeat(np.arange(k), spec.per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels), size, size, 3), dtype=np.float32)
    boxes = masks = None
    if spec.regime == "detail":
        glyphs = glyph_library(k, rng)
        background = smooth_texture(rng, size)
        boxes = np.empty((len(labels), 4), dtype=np.int64)
        for i, y in enumerate(labels):
            img = background.copy()
            boxes[i] = place_glyph(img, glyphs[y], rng)
            images[i] = img + spec.noise * rng.normal(size=img.shape)
    elif spec.regime == "structure":
        masks = np.empty((len(labels), size, size, 2), dtype=np.float32)
        for i, y in enumerate(labels):
            img, masks[i] = render_structure(int(y), k, size, rng)
            images[i] = img + spec.noise * rng.normal(size=img.shape)
    else:
        families, n_glyphs = interaction_factors(k)
        glyphs = glyph_library(n_glyphs, rng)
        boxes = np.empty((len(labels), 4), dtype=np.int64)
        for i, y in enumerate(labels):
            family, glyph = divmod(int(y), n_glyphs)
            img = stripe_texture(family, size, rng)
            boxes[i] = place_glyph(img, glyphs[glyph], rng)
            images[i] = img + spec.noise * rng.normal(size=img.shape)
    return Dataset(images, labels.astype(np.int64), k, spec.regime, boxes, masks, seed=spec.seed)


def mask_glyphs(data: Dataset, spec: SyntheticSpec) -> Dataset:
    """Control copy of a detail dataset with every glyph box painted over by background."""
    if data.regime != "detail" or data.boxes is None:
        raise DatasetError("glyph masking applies to the detail regime only")
    rng = np.random.default_rng(spec.seed)
    rng.permutation(spec.num_classes * spec.per_class)
    glyph_library(spec.num_classes, rng)
    background = smooth_texture(rng, spec.image_size)
    noise_rng = np.random.default_rng(spec.seed + 1)
    images = data.images.copy()
    for i, (x0, y0, x1, y1) in enumerate(data.boxes):
        patch = background[y0:y1, x0:x1] + spec.noise * noise_rng.normal(size=(y1 - y0, x1 - x0, 3))
        images[i, y0:y1, x0:x1] = patch
    return dataclasses.replace(data, images=images)


# ----------------------------------------------------------------------------
# disk I/O
# ----------------------------------------------------------------------------


def _digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def write_dataset(data: Dataset, out_dir, spec: Optional[SyntheticSpec] = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if data.masks is not None:
        (out / "masks").mkdir(exist_ok=True)
    header = {
        "regime": data.regime,
        "K": data.num_classes,
        "count": len(data),
        "image_size": data.image_size,
        "seed": data.seed,
    }
    if spec is not None:
        header["noise"] = repr(spec.noise)
    lines = [f"{key}={value}" for key, value in header.items()]
    paths = []
    for i in range(len(data)):
        rel = f"images/{i:06d}.expt"
        blob = tensor_to_bytes(data.images[i])
        (out / rel).write_bytes(blob)
        parts = [rel, str(int(data.labels[i]))]
        hasher = hashlib.sha256(blob)
        if data.boxes is not None:
            parts += [str(int(v)) for v in data.boxes[i]]
        if data.masks is not None:
            mrel = f"masks/{i:06d}.expt"
            mblob = tensor_to_bytes(data.masks[i])
            (out / mrel).write_bytes(mblob)
            hasher.update(mblob)
            parts.append(mrel)
        parts.append("sha256:" + hasher.hexdigest()[:16])
        lines.append(" ".join(parts))
        paths.append(rel)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    data.paths = paths
    return out


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Dataset:
    data = render_dataset(spec)
    write_dataset(data, out_dir, spec)
    return data


def load_dataset(path) -> Dataset:
    """Read a dataset directory, validating the manifest and every checksum."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"{root}: no manifest")
    header, samples = {}, []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" in line and not samples:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
        else:
            samples.append((lineno, line.split()))
    for key in ("regime", "K", "count", "image_size", "seed"):
        if key not in header:
            raise DatasetError(f"{manifest}: header missing {key!r}")
    try:
        k, count, size = int(header["K"]), int(header["count"]), int(header["image_size"])
    except ValueError as exc:
        raise DatasetError(f"{manifest}: malformed header: {exc}") from exc
    if len(samples) != count:
        raise DatasetError(f"{manifest}: header count {count} but {len(samples)} samples listed")

    images = np.empty((count, size, size, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    boxes, masks, paths = [], [], []
    for i, (lineno, parts) in enumerate(samples):
        rel = parts[0]
        if len(parts) < 3 or not parts[-1].startswith("sha256:"):
            raise DatasetError(f"{manifest}:{lineno}: sample {rel} lacks a label or checksum")
        fields = parts[1:-1]
        try:
            labels[i] = int(fields[0])
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: sample {rel} has a malformed label") from None
        if not 0 <= labels[i] < k:
            raise DatasetError(f"{manifest}:{lineno}: sample {rel} label {labels[i]} outside K={k}")
        blob_path = root / rel
        if not blob_path.is_file():
            raise DatasetError(f"{blob_path}: missing image file")
        blob = blob_path.read_bytes()
        hasher = hashlib.sha256(blob)
        extra = fields[1:]
        if len(extra) == 4:
            boxes.append([int(v) for v in extra])
        elif len(extra) == 1:
            mpath = root / extra[0]
            if not mpath.is_file():
                raise DatasetError(f"{mpath}: missing mask file")
            mblob = mpath.read_bytes()
            hasher.update(mblob)
            masks.append(tensor_from_bytes(mblob, str(mpath)))
        elif extra:
            raise DatasetError(f"{manifest}:{lineno}: sample {rel} has malformed region fields")
        if "sha256:" + hasher.hexdigest()[:16] != parts[-1]:
            raise DatasetError(f"{blob_path}: checksum failure")
        try:
            images[i] = tensor_from_bytes(blob, str(blob_path))
        except (TensorFileError, ValueError) as exc:
            raise DatasetError(str(exc)) from exc
        paths.append(rel)
    if boxes and len(boxes) != count or masks and len(masks) != count:
        raise DatasetError(f"{manifest}: region annotations present for only some samples")
    return Dataset(
        images,
        labels,
        k,
        header["regime"],
        np.asarray(boxes, dtype=np.int64) if boxes else None,
        np.stack(masks) if masks else None,
        paths,
        int(header["seed"]),
    )


def directory_digest(path) -> str:
    """sha256 over every file (relative path + bytes) in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
