"""Datasets: manifests, image IO, fold splitting, supervised augmentation and
a procedural canopy generator standing in for field imagery.

Images are float32 arrays (H, W, 3) in [0, 1].
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_csv
from .tensor.image import bilinear_resize, gaussian_blur

LABELS = ("Control", "Low", "Medium", "High")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    fold: int | None = None

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


# -- manifest -------------------------------------------------------------


def read_manifest(path, base_dir=None) -> list[Record]:
    """Read a ``path,label,fold`` CSV.

    Relative image paths resolve against ``base_dir``, else ``$CSVT_DATA_DIR``,
    else the manifest's own directory.
    """
    path = Path(path)
    base = Path(base_dir or os.environ.get("CSVT_DATA_DIR") or path.parent)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["path", "label", "fold"]:
            raise ValueError(f"{path}: expected header path,label,fold")
        for n, row in enumerate(reader, start=2):
            if row["label"] not in LABEL_INDEX:
                raise ValueError(f"{path}:{n}: unknown label {row['label']!r}")
            fold = row["fold"].strip()
            p = Path(row["path"])
            records.append(Record(
                str(p if p.is_absolute() else base / p), row["label"], int(fold) if fold else None
            ))
    return records


def write_manifest(path, records: Sequence[Record], relative_to=None) -> None:
    rows = []
    for r in records:
        p = r.path
        if relative_to is not None:
            p = os.path.relpath(p, relative_to)
        rows.append((p, r.label, "" if r.fold is None else r.fold))
    atomic_write_csv(path, ("path", "label", "fold"), rows)


def split(records: Sequence[Record], test_fold: int) -> tuple[list[Record], list[Record]]:
    """Train/test partition for one cross-validation round."""
    if any(r.fold is None for r in records):
        raise ValueError("records have no fold assignment; run kfold_split first")
    train = [r for r in records if r.fold != test_fold]
    test = [r for r in records if r.fold == test_fold]
    return train, test


# -- image IO -------------------------------------------------------------


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    u8 = _to_uint8(img)
    h, w = u8.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def parse_pnm_header(blob: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset) of a binary PNM."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def decode_ppm(blob: bytes) -> np.ndarray:
    magic, w, h, maxval, offset = parse_pnm_header(blob)
    if magic != b"P6":
        raise ValueError("not a binary PPM (P6)")
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        atomic_write_bytes(path, encode_ppm(img))
        return
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(_to_uint8(img), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return decode_ppm(path.read_bytes())
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_images(records: Sequence[Record]) -> np.ndarray:
    return np.stack([read_image(r.path) for r in records])


# -- cropping and folds ---------------------------------------------------


def random_corners(height: int, width: int, size: int, count: int, rng) -> list[tuple[int, int]]:
    if height < size or width < size:
        raise ValueError(f"image {height}x{width} is smaller than crop size {size}")
    ys = rng.integers(0, height - size + 1, size=count)
    xs = rng.integers(0, width - size + 1, size=count)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def crop_patches(image: np.ndarray, size: int = 224, count: int = 1, rng=None) -> list[np.ndarray]:
    """``count`` square patches with uniformly random top-left corners."""
    rng = rng if rng is not None else np.random.default_rng()
    corners = random_corners(image.shape[0], image.shape[1], size, count, rng)
    return [image[y:y + size, x:x + size].copy() for y, x in corners]


def kfold_split(records: Sequence[Record], k: int = 5, seed: int = 0) -> list[Record]:
    """Class-stratified fold assignment; a pure function of (records, k, seed).

    Each class is shuffled and dealt round-robin, starting where the previous
    class stopped, so per-class fold counts differ by at most one and fold
    totals stay balanced too.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    out = list(records)
    start = 0
    for label in LABELS:
        idx = [i for i, r in enumerate(records) if r.label == label]
        if not idx:
            continue
        if len(idx) < k:
            raise ValueError(f"class {label} has {len(idx)} samples, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(idx)):
            out[i] = replace(records[i], fold=(start + pos) % k)
        start = (start + len(idx)) % k
    return out


# -- supervised augmentation ---------------------------------------------


def one_hot(labels: Sequence[int], num_classes: int = len(LABELS)) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def label_smooth(onehot: np.ndarray, eps: float = 0.1) -> np.ndarray:
    """``(1 - eps) * onehot + eps / K``."""
    onehot = np.asarray(onehot, dtype=np.float64)
    return (1.0 - eps) * onehot + eps / onehot.shape[-1]


def mixup(batch: np.ndarray, labels: np.ndarray, alpha: float = 0.2, rng=None, lam: float | None = None):
    """Blend every sample with a random partner using one Beta(alpha, alpha) weight."""
    if len(batch) < 2:
        raise ValueError("mixup needs a batch of at least two samples")
    rng = rng if rng is not None else np.random.default_rng()
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    perm = rng.permutation(len(batch))
    x = lam * batch + (1.0 - lam) * batch[perm]
    y = lam * labels + (1.0 - lam) * labels[perm]
    return x.astype(batch.dtype), y


def sample_crop_box(height: int, width: int, rng, scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3),
                    attempts: int = 10) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) covering ``scale`` of the area at an aspect in ``ratio``."""
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def random_resized_crop(image: np.ndarray, size: int, rng, scale=(0.35, 1.0)) -> np.ndarray:
    top, left, h, w = sample_crop_box(image.shape[0], image.shape[1], rng, scale)
    return bilinear_resize(image[top:top + h, left:left + w], size, size)


def train_augment(image: np.ndarray, size: int, rng, scale=(0.35, 1.0)) -> np.ndarray:
    """Random-size crop plus horizontal flip."""
    out = random_resized_crop(image, size, rng, scale)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# -- synthetic canopy imagery ---------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Per-class rendering parameters, ordered Control, Low, Medium, High."""

    image_size: int = 64
    samples_per_class: int = 128
    seed: int = 0
    hue_means: tuple = (0.19, 0.23, 0.27, 0.31)
    hue_std: float = 0.01
    saturation: tuple = (0.45, 0.55, 0.65, 0.75)
    leaf_value: tuple = (0.55, 0.62, 0.69, 0.76)
    canopy_cover: tuple = (0.35, 0.5, 0.65, 0.8)
    texture_freq: tuple = (2.0, 3.0, 4.0, 5.0)
    stem_density: tuple = (0.5, 1.0, 1.5, 2.0)
    noise: float = 0.02

    def validate(self) -> None:
        per_class = ("hue_means", "saturation", "leaf_value", "canopy_cover",
                     "texture_freq", "stem_density")
        for name in per_class:
            if len(getattr(self, name)) != len(LABELS):
                raise ValueError(f"{name} needs one value per class ({len(LABELS)})")
        if self.samples_per_class < 0 or self.image_size < 8:
            raise ValueError("samples_per_class must be >= 0 and image_size >= 8")
        gaps = np.diff(np.sort(self.hue_means))
        if gaps.min() < 2 * self.hue_std:
            raise ValueError("hue means must be separated by at least twice the hue std")
        green = expected_green(self)
        if np.any(np.diff(green) <= 0):
            raise ValueError("class parameters do not give a strictly increasing green level")


_SOIL = np.array([0.42, 0.32, 0.22])


def expected_green(spec: SynthSpec) -> np.ndarray:
    """Approximate per-class mean green level implied by ``spec``."""
    rgb = hsv_to_rgb(np.stack([spec.hue_means, spec.saturation, spec.leaf_value], axis=-1))
    cover = np.asarray(spec.canopy_cover)
    return cover * rgb[:, 1] + (1 - cover) * _SOIL[1]


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape)
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        out[..., 0] = np.where(m, r, out[..., 0])
        out[..., 1] = np.where(m, g, out[..., 1])
        out[..., 2] = np.where(m, b, out[..., 2])
    return out


def _band_noise(size: int, freq: float, rng) -> np.ndarray:
    """Sum of random-phase plane waves around ``freq`` cycles per image, in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(6):
        theta = rng.uniform(0, math.pi)
        f = freq * rng.uniform(0.7, 1.3)
        field += np.cos(2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta))
                        + rng.uniform(0, 2 * math.pi))
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return field


def _stem_mask(size: int, density: float, rng) -> np.ndarray:
    """Thin near-vertical strokes; ``density`` strokes per 16 px of width."""
    mask = np.zeros((size, size))
    n = max(1, int(round(density * size / 16)))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n):
        x0, y0 = rng.uniform(0, size), rng.uniform(0, size)
        angle = math.pi / 2 + rng.normal(0, 0.3)
        length = rng.uniform(0.3, 0.7) * size
        dx, dy = math.cos(angle), math.sin(angle)
        t = np.clip((xx - x0) * dx + (yy - y0) * dy, -length / 2, length / 2)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        mask = np.maximum(mask, np.clip(1.5 - dist, 0, 1))
    return mask


def render_canopy(spec: SynthSpec, cls: int, rng) -> np.ndarray:
    size = spec.image_size
    texture = _band_noise(size, spec.texture_freq[cls], rng)
    cover = spec.canopy_cover[cls]
    canopy = (texture >= np.quantile(texture, 1 - cover)).astype(np.float64)
    canopy = np.clip(gaussian_blur(canopy[..., None], 0.8)[..., 0], 0, 1)
    stems = _stem_mask(size, spec.stem_density[cls], rng)
    hue = spec.hue_means[cls] + rng.normal(0, spec.hue_std)
    shade = 0.85 + 0.3 * _band_noise(size, 2 * spec.texture_freq[cls], rng)
    hsv = np.stack([
        np.full((size, size), hue),
        np.full((size, size), spec.saturation[cls]),
        np.clip(spec.leaf_value[cls] * shade, 0, 1),
    ], axis=-1)
    leaf = hsv_to_rgb(hsv)
    soil = _SOIL * (0.9 + 0.2 * _band_noise(size, 1.5, rng))[..., None]
    img = canopy[..., None] * leaf + (1 - canopy[..., None]) * soil
    stem_rgb = hsv_to_rgb(np.array([hue, spec.saturation[cls], spec.leaf_value[cls] * 0.8]))
    img = stems[..., None] * stem_rgb + (1 - stems[..., None]) * img
    img = img + rng.normal(0, spec.noise, img.shape)
    # quantise so in-memory and on-disk copies agree exactly
    return (_to_uint8(img) / 255.0).astype(np.float32)


def synth_generate(spec: SynthSpec, out_dir=None, k: int = 5, fmt: str = "png"):
    """Render ``samples_per_class`` images per class.

    Returns ``(images, records)``; when ``out_dir`` is given the images are
    written there together with ``manifest.csv``. Folds are assigned when
    every class has at least ``k`` samples.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    images, records = [], []
    for cls, label in enumerate(LABELS):
        for i in range(spec.samples_per_class):
            images.append(render_canopy(spec, cls, rng))
            name = f"{label.lower()}_{i:05d}.{fmt}"
            records.append(Record(str(Path(out_dir or ".") / label.lower() / name), label))
    if spec.samples_per_class >= k:
        records = kfold_split(records, k=k, seed=spec.seed)
    if out_dir is not None:
        for img, rec in zip(images, records):
            write_image(rec.path, img)
        write_manifest(Path(out_dir) / "manifest.csv", records, relative_to=out_dir)
    arr = np.stack(images) if images else np.zeros((0, spec.image_size, spec.image_size, 3),
                                                   dtype=np.float32)
    return arr, records
