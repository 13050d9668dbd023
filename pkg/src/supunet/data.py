"""Synthetic ellipse phantoms, PGM sample files and dataset manifests.

A manifest is a text file whose first line is ``H W C count seed`` and whose
remaining lines are ``image_path<TAB>mask_path``, relative to the manifest's
directory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from supunet import pgm
from supunet.rng import SplitMix64, derive_seed
from supunet.tensor import ShapeError

IMAGE_MAXVAL = 65535
MASK_MAXVAL = 255

DIFFICULTY = {
    # noise sigma, lesion intensity offset
    "easy": (0.05, 0.30),
    "hard": (0.15, 0.12),
}

# the two diagonal reflections complete the dihedral group of the square,
# so any composition of two ops is again a single op or the identity
AUGMENTATIONS = ("flip_h", "flip_v", "rot90", "rot180", "rot270", "transpose", "anti_transpose")


@dataclass
class Sample:
    image: np.ndarray  # (1, in_channels, H, W), values in [0, 1]
    mask: np.ndarray  # (H, W) integer class labels

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise ShapeError(f"sample image must be (1, c, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[2:]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.image.shape}")


@dataclass
class Manifest:
    height: int
    width: int
    num_classes: int
    seed: int
    entries: List[Tuple[str, str]] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def count(self) -> int:
        return len(self.entries)


def generate_phantom(seed: int, height: int, width: int, difficulty: str = "easy") -> Sample:
    """One image with 1-3 bright elliptical lesions on a smooth noisy background.

    The background is a constant level plus two low-frequency cosine waves;
    the whole sample is a pure function of the arguments.
    """
    if height < 16 or width < 16:
        raise ShapeError(f"phantoms need H, W >= 16, got {height}x{width}")
    try:
        sigma, offset = DIFFICULTY[difficulty]
    except KeyError:
        raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY)}, got {difficulty!r}") from None
    gen = SplitMix64(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    level = gen.uniform(1, 0.30, 0.40)[0]
    background = np.full((height, width), level)
    for _ in range(2):
        fy, fx = gen.uniform(2, 0.3, 1.2)
        phase = gen.uniform(1, 0.0, 2.0 * math.pi)[0]
        amp = gen.uniform(1, 0.01, 0.04)[0]
        background += amp * np.cos(2.0 * math.pi * (fy * yy / height + fx * xx / width) + phase)

    side = min(height, width)
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(1 + int(gen.integers(1, 3)[0])):
        a, b = gen.uniform(2, 0.10 * side, 0.22 * side)
        theta = gen.uniform(1, 0.0, math.pi)[0]
        reach = max(a, b)
        cy = gen.uniform(1, reach, height - 1 - reach)[0]
        cx = gen.uniform(1, reach, width - 1 - reach)[0]
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0

    noise = gen.normal(height * width).reshape(height, width)
    image = np.clip(background + offset * mask + sigma * noise, 0.0, 1.0)
    return Sample(image=image[None, None], mask=mask.astype(np.int64))


def downsample_labels(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsampling keeping the top-left pixel of each block.

    Works on (H, W) or batched (..., H, W) label maps.
    """
    h, w = mask.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"label map {h}x{w} is not divisible by factor {factor}")
    return mask[..., ::factor, ::factor]


def augment(sample: Sample, op: str) -> Sample:
    """Apply one dihedral transform jointly to image and mask."""
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}; choose from {AUGMENTATIONS}")
    h, w = sample.mask.shape
    if op not in ("flip_h", "flip_v") and h != w:
        raise ShapeError(f"{op} needs a square sample, got {h}x{w}")
    if op == "flip_h":
        fn = lambda a: a[..., ::-1]
    elif op == "flip_v":
        fn = lambda a: a[..., ::-1, :]
    elif op in ("rot90", "rot180", "rot270"):
        k = int(op[3:]) // 90
        fn = lambda a: np.rot90(a, k, axes=(-2, -1))
    elif op == "transpose":
        fn = lambda a: np.swapaxes(a, -2, -1)
    else:  # anti_transpose
        fn = lambda a: np.swapaxes(a, -2, -1)[..., ::-1, ::-1]
    return Sample(
        image=np.ascontiguousarray(fn(sample.image)),
        mask=np.ascontiguousarray(fn(sample.mask)),
    )


def save_sample(sample: Sample, image_path: os.PathLike, mask_path: os.PathLike) -> None:
    """Image as 16-bit P5 (``round(v * 65535)``), mask as 8-bit P5 class indices."""
    if sample.image.shape[1] != 1:
        raise ShapeError("PGM files hold single-channel images only")
    levels = np.rint(np.clip(sample.image[0, 0], 0.0, 1.0) * IMAGE_MAXVAL).astype(np.int64)
    pgm.write(image_path, levels, IMAGE_MAXVAL)
    pgm.write(mask_path, sample.mask, MASK_MAXVAL)


def load_image(path: os.PathLike) -> np.ndarray:
    img = pgm.read(path)
    return (img.pixels.astype(np.float64) / img.maxval)[None, None]


def load_mask(path: os.PathLike, num_classes: int = MASK_MAXVAL + 1) -> np.ndarray:
    img = pgm.read(path)
    bad = np.flatnonzero(img.pixels >= num_classes)
    if bad.size:
        raise pgm.DecodeError(
            f"{path}: label {img.pixels.flat[bad[0]]} outside [0, {num_classes})",
            img.raster_offset + int(bad[0]),
        )
    return img.pixels


def load_sample(
    image_path: os.PathLike, mask_path: os.PathLike, num_classes: int = MASK_MAXVAL + 1
) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path, num_classes)
    if mask.shape != image.shape[2:]:
        raise ShapeError(f"{mask_path}: mask {mask.shape} does not match image {image.shape[2:]}")
    return Sample(image=image, mask=mask)


def write_manifest(path: os.PathLike, manifest: Manifest) -> None:
    lines = [f"{manifest.height} {manifest.width} {manifest.num_classes} {manifest.count} {manifest.seed}"]
    lines += [f"{img}\t{msk}" for img, msk in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: os.PathLike) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    try:
        h, w, c, count, seed = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}: header must be 'H W C count seed', got {lines[0]!r}") from None
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        entries.append((parts[0], parts[1]))
    if len(entries) != count:
        raise ValueError(f"{path}: header declares {count} samples, found {len(entries)}")
    return Manifest(h, w, c, seed, entries, root=path.parent)


def load_dataset(manifest: Manifest) -> List[Sample]:
    """Decode every entry, checking it against the declared H, W and C."""
    samples = []
    for img, msk in manifest.entries:
        sample = load_sample(manifest.root / img, manifest.root / msk, manifest.num_classes)
        if sample.mask.shape != (manifest.height, manifest.width):
            raise ShapeError(
                f"{img}: decoded size {sample.mask.shape} differs from the manifest's "
                f"{(manifest.height, manifest.width)}"
            )
        samples.append(sample)
    return samples


def generate_samples(count: int, height: int, width: int, difficulty: str, seed: int) -> List[Sample]:
    return [
        generate_phantom(derive_seed(seed, i), height, width, difficulty) for i in range(count)
    ]


def generate_dataset(
    out_dir: os.PathLike, count: int, height: int, width: int, difficulty: str, seed: int
) -> Path:
    """Write ``count`` phantoms plus ``manifest.txt`` into ``out_dir``."""
    if count < 1:
        raise ValueError("count must be ≥ 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(height, width, 2, seed)
    for i, sample in enumerate(generate_samples(count, height, width, difficulty, seed)):
        img, msk = f"sample_{i:05d}.pgm", f"sample_{i:05d}_mask.pgm"
        save_sample(sample, out_dir / img, out_dir / msk)
        manifest.entries.append((img, msk))
    path = out_dir / "manifest.txt"
    write_manifest(path, manifest)
    return path


def stack(samples: Sequence[Sample]):
    """Batch samples into an (n, c, H, W) image tensor and (n, H, W) labels."""
    images = np.concatenate([s.image for s in samples], axis=0)
    masks = np.stack([s.mask for s in samples], axis=0)
    return images, masks
