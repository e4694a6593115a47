"""Synthetic dataset generation, PGM image/mask I/O, splitting, augmentation.

Samples are grayscale images in [0,1] with binary foreground masks. The
generator draws 1-2 smooth star-convex blobs over a low-frequency textured
background, offsets their intensity by a configurable contrast, and adds
Gaussian noise, so the foreground is findable but not trivially so.

On disk a dataset is `root/{train,val,test}/{images,masks}/*.pgm` (binary
8-bit P5) plus a `manifest.json` recording ids and generator parameters.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "val", "test")
MASK_THRESHOLD = 128


class DataError(RuntimeError):
    """A dataset file is missing, malformed, or inconsistent."""


@dataclass
class Sample:
    """One grayscale image with an optional binary mask."""

    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray | None  # (H, W) uint8 in {0, 1}, or None when unlabeled
    id: str

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic labeled/unlabeled partition of a training set."""

    labeled_fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit) reading and writing


def write_pgm(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"PGM payload must be 2-D, got shape {array.shape}")
    h, w = array.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + array.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e})") from e
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed; a single whitespace byte ends the header.
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (missing P5 magic)")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                raise DataError(f"{path}: unterminated comment in PGM header")
            continue
        if ch.isspace():
            pos += 1
            continue
        m = re.match(rb"[0-9]+", raw[pos:])
        if not m:
            raise DataError(f"{path}: malformed PGM header near byte {pos}")
        tokens.append(int(m.group()))
        pos += m.end()
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DataError(f"{path}: malformed PGM header (no delimiter after maxval)")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise DataError(f"{path}: unsupported PGM maxval {maxval} (need 255)")
    payload = raw[pos:]
    if len(payload) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def save_sample(images_dir, masks_dir, sample: Sample) -> None:
    img = np.clip(np.round(sample.image[0] * 255.0), 0, 255).astype(np.uint8)
    write_pgm(Path(images_dir) / f"{sample.id}.pgm", img)
    if sample.mask is not None:
        write_pgm(Path(masks_dir) / f"{sample.id}.pgm", sample.mask.astype(np.uint8) * 255)


def load_pair_dir(directory) -> list[Sample]:
    """Load image/mask pairs from `directory/{images,masks}/*.pgm`.

    Masks are matched to images by file stem; an image with no mask file
    loads as an unlabeled sample.
    """
    directory = Path(directory)
    images_dir = directory / "images"
    masks_dir = directory / "masks"
    if not images_dir.is_dir():
        raise DataError(f"{images_dir}: missing images directory")
    samples = []
    for img_path in sorted(images_dir.glob("*.pgm")):
        img = read_pgm(img_path)
        mask_path = masks_dir / img_path.name
        mask = None
        if mask_path.exists():
            raw_mask = read_pgm(mask_path)
            if raw_mask.shape != img.shape:
                raise DataError(
                    f"{mask_path}: mask shape {raw_mask.shape} does not match image shape {img.shape}"
                )
            mask = (raw_mask >= MASK_THRESHOLD).astype(np.uint8)
        image = (img.astype(np.float32) / 255.0)[None, :, :]
        samples.append(Sample(image=image, mask=mask, id=img_path.stem))
    return samples


# ---------------------------------------------------------------------------
# synthetic generation


def _blob_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Support of one smooth star-convex blob, as a boolean (size, size) map."""
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    r0 = rng.uniform(0.11, 0.18) * size
    a2 = rng.uniform(0.0, 0.10)
    a3 = rng.uniform(0.0, 0.05)
    ph2, ph3 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys - cy
    dx = xs - cx
    theta = np.arctan2(dy, dx)
    radius = r0 * (1.0 + a2 * np.cos(2.0 * theta + ph2) + a3 * np.cos(3.0 * theta + ph3))
    return dy * dy + dx * dx <= radius * radius


def _background_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean low-frequency texture with amplitude about 0.08."""
    white = rng.standard_normal((size, size))
    spectrum = np.fft.fft2(white)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    keep = np.sqrt(fy * fy + fx * fx) <= 0.1
    low = np.real(np.fft.ifft2(spectrum * keep))
    low -= low.mean()
    scale = low.std()
    if scale > 0:
        low = low / scale * 0.08
    return low


def generate_synthetic(count: int, size: int, seed: int, contrast: float = 0.25) -> list[Sample]:
    """Generate deterministic blob-segmentation samples.

    Each image holds 1-2 blobs whose mean intensity sits `contrast` above or
    below the background level, over a low-frequency texture, with Gaussian
    noise (sigma 0.1). Every mask contains both classes.
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    if size < 4 or size % 4 != 0:
        raise ValueError(f"size must be a positive multiple of 4, got {size}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        n_blobs = int(rng.integers(1, 3))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_blobs):
            mask |= _blob_mask(size, rng)
        base = rng.uniform(0.35, 0.65)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        texture = _background_texture(size, rng)
        noise = rng.normal(0.0, 0.1, size=(size, size))
        image = base + sign * contrast * mask.astype(np.float64) + texture + noise
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None, :, :]
        mask = mask.astype(np.uint8)
        if mask.sum() == 0 or mask.sum() == size * size:
            raise AssertionError("generated mask lost a class; generator parameters are off")
        samples.append(Sample(image=image, mask=mask, id=f"s{seed}_{i:05d}"))
    return samples


def _split_counts(count: int) -> tuple[int, int, int]:
    """75 / 12.5 / 12.5 train/val/test split, every split nonempty when possible."""
    n_val = max(count // 8, 1 if count >= 3 else 0)
    n_test = max(count // 8, 1 if count >= 3 else 0)
    n_train = count - n_val - n_test
    return n_train, n_val, n_test


def generate_dataset(out_dir, count: int, size: int, seed: int, contrast: float = 0.25) -> Path:
    """Write a full train/val/test dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    counts = dict(zip(SPLIT_NAMES, _split_counts(count)))
    split_seeds = dict(zip(SPLIT_NAMES, (int(s) for s in np.random.SeedSequence(seed).generate_state(3))))
    ids: dict[str, list[str]] = {}
    for name in SPLIT_NAMES:
        images_dir = out_dir / name / "images"
        masks_dir = out_dir / name / "masks"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
        split_samples = (
            generate_synthetic(counts[name], size, split_seeds[name], contrast) if counts[name] else []
        )
        for sample in split_samples:
            save_sample(images_dir, masks_dir, sample)
        ids[name] = [s.id for s in split_samples]
    manifest = {
        "count": count,
        "size": size,
        "seed": seed,
        "contrast": contrast,
        "counts": counts,
        "ids": ids,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# splitting and augmentation


def split(samples: list[Sample], spec: SplitSpec, min_labeled: int = 1) -> tuple[list[Sample], list[Sample]]:
    """Deterministic labeled/unlabeled partition.

    Samples are shuffled by a generator seeded from the spec, the first
    round(fraction * n) become the labeled set, and the rest lose their
    masks. The inputs are left untouched, so callers keep the held-back
    masks for evaluation.
    """
    n = len(samples)
    n_labeled = int(round(spec.labeled_fraction * n))
    n_labeled = min(max(n_labeled, 1), n)
    if n_labeled < min_labeled:
        raise ValueError(
            f"labeled_fraction {spec.labeled_fraction} yields {n_labeled} labeled samples; need at least {min_labeled}"
        )
    order = np.argsort([s.id for s in samples], kind="stable")
    perm = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [samples[order[j]] for j in perm]
    labeled = shuffled[:n_labeled]
    for s in labeled:
        if s.mask is None:
            raise DataError(f"sample {s.id} fell in the labeled split but has no mask")
    unlabeled = [Sample(image=s.image, mask=None, id=s.id) for s in shuffled[n_labeled:]]
    return labeled, unlabeled


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random flips plus photometric jitter.

    Horizontal and vertical flips (each p=0.5) apply to image and mask
    alike; a contrast scale in [0.9, 1.1] about the image mean and a
    brightness shift in [-0.1, 0.1] apply to the image only, clamped back
    to [0, 1].
    """
    image = sample.image
    mask = sample.mask
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    delta = rng.uniform(-0.1, 0.1)
    cscale = rng.uniform(0.9, 1.1)
    if flip_h:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if flip_v:
        image = image[:, ::-1, :]
        mask = mask[::-1, :] if mask is not None else None
    mean = float(image.mean())
    image = (image - mean) * cscale + mean + delta
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = np.ascontiguousarray(mask) if mask is not None else None
    return Sample(image=np.ascontiguousarray(image), mask=mask, id=sample.id)
