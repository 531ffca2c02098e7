"""Synthetic infrared scenes and 8-bit PGM dataset IO.

A scene is a smooth low-frequency background plus pixel noise with a few
small, dim Gaussian targets stamped on top. The mask marks target pixels
whose stamped intensity is above half the target's peak.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, Path]

MANIFEST = "manifest.txt"
BACKGROUNDS = ("smooth-gradient", "cloud-clutter")
# small targets: never let ground truth cover 1% of the frame
MAX_TARGET_FRACTION = 0.01


class PGMError(ValueError):
    code = "pgm_error"


class BadMagic(PGMError):
    code = "bad_magic"


class BadMaxval(PGMError):
    code = "bad_maxval"


class TruncatedData(PGMError):
    code = "truncated_data"


@dataclass(frozen=True)
class SceneSpec:
    resolution: tuple[int, int] = (64, 64)
    targets: tuple[int, int] = (1, 3)
    radius: tuple[int, int] = (1, 4)
    intensity: tuple[float, float] = (0.35, 0.6)
    background: str = "cloud-clutter"
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValueError("resolution must be positive")
        if not 0 <= self.targets[0] <= self.targets[1]:
            raise ValueError("targets must be a (min, max) count range")
        if not 1 <= self.radius[0] <= self.radius[1]:
            raise ValueError("radius must be a (min, max) range with min >= 1")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")


@dataclass
class Sample:
    image: np.ndarray  # float32 in [0, 1], shape (H, W)
    mask: np.ndarray   # uint8 in {0, 1}, shape (H, W)
    seed: tuple[int, int]


def _background(rng: np.random.Generator, h: int, w: int, style: str) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = rng.uniform(-1, 1, 2)
    bg = 0.25 + 0.1 * (gy * yy / h + gx * xx / w)
    if style == "cloud-clutter":
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(0.15, 0.4) * max(h, w)
            amp = rng.uniform(-0.12, 0.15)
            bg += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return bg


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Scene ``index`` of the dataset described by ``spec``; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.resolution
    image = _background(rng, h, w, spec.background)
    image += rng.normal(0.0, spec.noise_sigma, (h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]

    n_targets = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
    placed: list[tuple[int, int, int]] = []
    for _ in range(n_targets):
        r = int(rng.integers(spec.radius[0], spec.radius[1] + 1))
        if 2 * r + 1 > min(h, w):
            continue
        for _attempt in range(100):
            cy = int(rng.integers(r, h - r))
            cx = int(rng.integers(r, w - r))
            # keep supports apart by a one-pixel gap so targets stay separate components
            if all(max(abs(cy - py), abs(cx - px)) > r + pr + 1 for py, px, pr in placed):
                break
        else:
            continue
        peak = rng.uniform(*spec.intensity)
        sigma = r / 2.0
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        support = d2 <= r * r
        blob = np.where(support, peak * np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        core = blob > 0.5 * peak
        if mask.sum() + core.sum() >= MAX_TARGET_FRACTION * h * w:
            continue
        placed.append((cy, cx, r))
        image += blob
        mask[core] = 1
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask, seed=(spec.seed, index))


def generate_dataset(spec: SceneSpec, count: int) -> list[Sample]:
    return [generate_scene(spec, i) for i in range(count)]


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, round-to-nearest."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def save_pgm(image: np.ndarray, path: PathLike) -> None:
    """Write a 2-D uint8 raster (or [0, 1] floats, quantized) as a binary PGM."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedData("PGM header ended early")
    return buf[start:pos], pos


def load_pgm(path: PathLike) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255 into a (H, W) uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise BadMagic(f"{path}: expected P5 magic, got {buf[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PGMError(f"{path}: malformed header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise BadMaxval(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte separates header from raster
    payload = buf[pos:pos + w * h]
    if len(payload) != w * h:
        raise TruncatedData(f"{path}: expected {w * h} bytes of raster, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(samples: Sequence[Sample], root: PathLike) -> Path:
    """images/NNNN.pgm, masks/NNNN.pgm (mask values 0/255) and a manifest of relative pairs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_rel, mask_rel = f"images/{i:04d}.pgm", f"masks/{i:04d}.pgm"
        save_pgm(quantize(s.image), root / img_rel)
        save_pgm((s.mask > 0).astype(np.uint8) * 255, root / mask_rel)
        lines.append(f"{img_rel},{mask_rel}\n")
    (root / MANIFEST).write_text("".join(lines))
    return root


def read_dataset(root: PathLike) -> list[Sample]:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    samples = []
    for i, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        img_rel, mask_rel = (p.strip() for p in line.split(","))
        image = load_pgm(root / img_rel).astype(np.float32) / 255.0
        raw_mask = load_pgm(root / mask_rel)
        if not np.isin(raw_mask, (0, 255)).all():
            raise PGMError(f"{mask_rel}: mask values must be 0 or 255")
        samples.append(Sample(image=image, mask=(raw_mask > 0).astype(np.uint8), seed=(-1, i)))
    return samples


def split_dataset(samples: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first round(fraction * n) go to train."""
    if len(samples) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(samples)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train fraction {train_fraction} of {n} samples leaves an empty split")
    order = np.random.default_rng(seed).permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]
