"""Synthetic bi-temporal pairs and Netpbm raster I/O.

A dataset directory holds, per sample id::

    {id}_imA.ppm  {id}_imB.ppm     RGB images, P6
    {id}_semA.pgm {id}_semB.pgm    semantic maps, P5 (0 = no change, 255 = ignore)
    {id}_change.pgm                binary change mask, P5 (0/1)
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gated_scd.errors import DataError, FormatError, ParameterError
from gated_scd.losses import ScdLabels
from gated_scd.models import IGNORE_INDEX

logger = logging.getLogger(__name__)

NOISE_AMPLITUDE = 0.1
PIXELS_PER_REGION = 256
REGION_CHUNK_ELEMENTS = 1 << 20  # pixel-seed distances held at once

# Land-cover colours, index 0 unused (no-change carries no colour of its own)
PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.85, 0.20, 0.15],  # built-up
        [0.15, 0.60, 0.20],  # vegetation
        [0.15, 0.35, 0.80],  # water
        [0.80, 0.75, 0.35],  # bare soil
        [0.55, 0.55, 0.55],  # road
        [0.45, 0.80, 0.55],  # low vegetation
        [0.60, 0.30, 0.65],
        [0.95, 0.55, 0.10],
    ]
)


@dataclass
class SamplePair:
    image_A: np.ndarray  # (1, 3, H, W) in [0, 1]
    image_B: np.ndarray
    sem_A: np.ndarray  # (H, W) uint8
    sem_B: np.ndarray
    change_mask: np.ndarray  # (H, W) uint8, 0/1
    sample_id: str = ""


def _palette(num_classes: int) -> np.ndarray:
    if num_classes < len(PALETTE):
        return PALETTE
    extra = np.random.default_rng(num_classes).uniform(0.1, 0.9, (num_classes + 1 - len(PALETTE), 3))
    return np.vstack([PALETTE, extra])


def _grow_regions(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Region id per pixel: weighted nearest-seed growth from random seeds."""
    n_regions = max(8, (h * w) // PIXELS_PER_REGION)
    seeds = rng.uniform(0, [h, w], size=(n_regions, 2))
    speed = rng.uniform(0.75, 1.25, n_regions)
    rows, cols = np.mgrid[0:h, 0:w]
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    chunk = max(1, REGION_CHUNK_ELEMENTS // n_regions)
    labels = np.empty(h * w, dtype=np.int64)
    for start in range(0, h * w, chunk):
        block = coords[start : start + chunk]
        dist = np.linalg.norm(block[:, None, :] - seeds[None, :, :], axis=2) / speed
        labels[start : start + chunk] = dist.argmin(axis=1)
    return labels.reshape(h, w)


def gen_synthetic_pair(
    seed: int | Sequence[int],
    H: int = 64,
    W: int = 64,
    K: int = 4,
    change_rate: float = 0.3,
) -> SamplePair:
    """Deterministic pair: T1 regions over K classes, a region subset relabelled at T2."""
    if H % 32 or W % 32 or H < 32 or W < 32:
        raise ParameterError(f"image size {H}x{W} must be a positive multiple of 32")
    if K < 2:
        raise ParameterError(f"need at least 2 classes, got {K}")
    if not 0.0 < change_rate < 1.0:
        raise ParameterError(f"change_rate must be in (0, 1), got {change_rate}")
    rng = np.random.default_rng(seed)
    regions = _grow_regions(H, W, rng)
    n_regions = int(regions.max()) + 1
    region_class = rng.integers(1, K + 1, n_regions)
    areas = np.bincount(regions.ravel(), minlength=n_regions)

    target = change_rate * H * W
    changed_regions = np.zeros(n_regions, dtype=bool)
    area = 0
    for r in rng.permutation(n_regions):
        if areas[r] and abs(area + areas[r] - target) < abs(area - target):
            changed_regions[r] = True
            area += areas[r]

    shift = rng.integers(1, K, n_regions)
    region_class_b = np.where(changed_regions, (region_class - 1 + shift) % K + 1, region_class)
    t1 = region_class[regions]
    t2 = region_class_b[regions]
    changed = changed_regions[regions]

    palette = _palette(K)
    images = []
    for cover in (t1, t2):
        noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, (H, W, 3))
        rgb = np.clip(palette[cover] + noise, 0.0, 1.0)
        images.append(rgb.transpose(2, 0, 1)[None])

    return SamplePair(
        image_A=images[0],
        image_B=images[1],
        sem_A=np.where(changed, t1, 0).astype(np.uint8),
        sem_B=np.where(changed, t2, 0).astype(np.uint8),
        change_mask=changed.astype(np.uint8),
    )


def synthetic_dataset(
    seed: int, count: int, size: int = 64, classes: int = 4, change_rate: float = 0.3
) -> list[SamplePair]:
    pairs = []
    for i in range(count):
        pair = gen_synthetic_pair([seed, i], size, size, classes, change_rate)
        pair.sample_id = f"pair_{i:04d}"
        pairs.append(pair)
    return pairs


def change_from_semantics(sem_A: np.ndarray, sem_B: np.ndarray) -> np.ndarray:
    """Binary change mask implied by SECOND-style semantic maps."""
    nonzero_a = (sem_A != 0) & (sem_A != IGNORE_INDEX)
    nonzero_b = (sem_B != 0) & (sem_B != IGNORE_INDEX)
    return (nonzero_a | nonzero_b).astype(np.uint8)


def stack_batch(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, ScdLabels]:
    images_a = np.concatenate([p.image_A for p in pairs], axis=0)
    images_b = np.concatenate([p.image_B for p in pairs], axis=0)
    labels = ScdLabels(
        sem_A=np.stack([p.sem_A for p in pairs]),
        sem_B=np.stack([p.sem_B for p in pairs]),
        change=np.stack([p.change_mask for p in pairs]),
    )
    return images_a, images_b, labels


# =============================================================================
# Netpbm
# =============================================================================

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def _read_netpbm(path: Path, magic: bytes) -> tuple[int, int, bytes]:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()}, got {raw[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        match = _TOKEN.match(raw, pos)
        if not match:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(match.group(1)))
        pos = match.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} not supported, only 255")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: header not terminated")
    return width, height, raw[pos + 1 :]


def write_pgm(label_map: np.ndarray, path: Path) -> None:
    arr = np.asarray(label_map)
    if arr.ndim != 2:
        raise FormatError(f"{path}: PGM needs a 2-D map, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise FormatError(f"{path}: values outside 0..255")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    w, h, payload = _read_netpbm(path, b"P5")
    if len(payload) < w * h:
        raise FormatError(f"{path}: expected {w * h} payload bytes, got {len(payload)}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w).copy()


def to_bytes_half_away(values: np.ndarray) -> np.ndarray:
    """round(255·v) with halves rounded away from zero, for v in [0, 1]."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_ppm(image: np.ndarray, path: Path) -> None:
    """Write a (3, H, W) or (1, 3, H, W) image with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"{path}: PPM needs 3 channels, got shape {arr.shape}")
    _, h, w = arr.shape
    payload = to_bytes_half_away(arr.transpose(1, 2, 0)).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def read_ppm(path: Path) -> np.ndarray:
    """(1, 3, H, W) float image in [0, 1]."""
    w, h, payload = _read_netpbm(path, b"P6")
    if len(payload) < 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} payload bytes, got {len(payload)}")
    rgb = np.frombuffer(payload[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return (rgb.transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


# =============================================================================
# Dataset directories
# =============================================================================


def write_pair(pair: SamplePair, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = pair.sample_id
    paths = [out_dir / f"{sid}_{suffix}" for suffix in
             ("imA.ppm", "imB.ppm", "semA.pgm", "semB.pgm", "change.pgm")]
    write_ppm(pair.image_A, paths[0])
    write_ppm(pair.image_B, paths[1])
    write_pgm(pair.sem_A, paths[2])
    write_pgm(pair.sem_B, paths[3])
    write_pgm(pair.change_mask, paths[4])
    return paths


def list_sample_ids(directory: Path) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(p.name[: -len("_semA.pgm")] for p in directory.glob("*_semA.pgm"))


def load_pair(directory: Path, sample_id: str) -> SamplePair:
    directory = Path(directory)
    needed = {s: directory / f"{sample_id}_{s}" for s in
              ("imA.ppm", "imB.ppm", "semA.pgm", "semB.pgm")}
    for path in needed.values():
        if not path.exists():
            raise DataError(f"sample {sample_id}: missing {path.name}")
    sem_a = read_pgm(needed["semA.pgm"])
    sem_b = read_pgm(needed["semB.pgm"])
    image_a = read_ppm(needed["imA.ppm"])
    image_b = read_ppm(needed["imB.ppm"])
    if image_a.shape[2:] != sem_a.shape or image_b.shape != image_a.shape:
        raise DataError(f"sample {sample_id}: images and maps disagree in size")
    return SamplePair(image_a, image_b, sem_a, sem_b,
                      change_from_semantics(sem_a, sem_b), sample_id)


def load_dataset(directory: Path) -> list[SamplePair]:
    ids = list_sample_ids(directory)
    if not ids:
        raise DataError(f"{directory}: no *_semA.pgm files")
    logger.info("loading %d pairs from %s", len(ids), directory)
    return [load_pair(directory, sid) for sid in ids]
