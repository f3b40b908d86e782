"""Image containers, patch extraction, synthetic rain, and dataset ingestion.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` holding floats in
``[0, 1]``; grayscale images keep a trailing channel axis of length one.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataIOError, DimensionError, FormatError, ParameterError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_SIDE = 16


def as_image(values, *, check_size: bool = False) -> np.ndarray:
    """Coerce ``values`` to an ``(H, W, C)`` float64 image and validate it."""
    img = np.asarray(values, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"expected an HxWx1 or HxWx3 image, got shape {img.shape}")
    if check_size and min(img.shape[:2]) < MIN_SIDE:
        raise DimensionError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    return img


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as an 8-bit PNG."""
    data = to_uint8(img)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if data.shape[2] == 1:
            Image.fromarray(data[:, :, 0], mode="L").save(path, format="PNG")
        else:
            Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def crop_window(shape: Sequence[int], size: int, rng_seed: int) -> tuple[int, int]:
    """Top-left corner of the window :func:`random_crop` takes for this seed."""
    height, width = shape[:2]
    if size < 1 or size > min(height, width):
        raise DimensionError(f"crop size {size} does not fit a {height}x{width} image")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop(img: np.ndarray, size: int, rng_seed: int) -> np.ndarray:
    img = as_image(img)
    top, left = crop_window(img.shape, size, rng_seed)
    return img[top:top + size, left:left + size].copy()


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsampling by an integer factor.

    Sides that are not a multiple of ``factor`` are first extended by
    reflection on the bottom/right edge.
    """
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    img = as_image(img)
    if factor == 1:
        return img.copy()
    h, w, c = img.shape
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")
    h2, w2 = img.shape[0] // factor, img.shape[1] // factor
    return img.reshape(h2, factor, w2, factor, c).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchRef:
    image_id: Hashable
    top: int
    left: int
    size: int

    def read(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        if not (0 <= self.top <= h - self.size and 0 <= self.left <= w - self.size):
            raise DimensionError(f"{self} lies outside a {h}x{w} image")
        return img[self.top:self.top + self.size, self.left:self.left + self.size]


@dataclass
class PatchStack:
    """Patch blocks ``(n, size, size, C)`` with their source references."""

    patches: np.ndarray
    refs: list[PatchRef] = field(default_factory=list)

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        if self.patches.ndim != 4 or len(self.patches) != len(self.refs):
            raise DimensionError("patch blocks and refs do not line up")

    def __len__(self) -> int:
        return len(self.refs)

    def flat(self) -> np.ndarray:
        return self.patches.reshape(len(self), -1)

    def take(self, indices) -> "PatchStack":
        indices = [int(i) for i in indices]
        return PatchStack(self.patches[indices], [self.refs[i] for i in indices])

    @classmethod
    def from_refs(cls, img: np.ndarray, refs: Sequence[PatchRef]) -> "PatchStack":
        img = as_image(img)
        refs = list(refs)
        if not refs:
            size = 0
            return cls(np.zeros((0, size, size, img.shape[2])), [])
        return cls(np.stack([r.read(img) for r in refs]), refs)


def grid_positions(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if size < 1 or stride < 1:
        raise ParameterError(f"patch size and stride must be positive, got {size}, {stride}")
    if size > min(height, width):
        raise ParameterError(f"patch size {size} exceeds a {height}x{width} image")
    return [(t, l) for t in range(0, height - size + 1, stride)
            for l in range(0, width - size + 1, stride)]


def extract_patches(img: np.ndarray, size: int, stride: int, image_id: Hashable = 0) -> PatchStack:
    """All ``size``-square windows on a ``stride`` grid, row-major."""
    img = as_image(img)
    refs = [PatchRef(image_id, t, l, size)
            for t, l in grid_positions(img.shape[0], img.shape[1], size, stride)]
    return PatchStack.from_refs(img, refs)


# ---------------------------------------------------------------------------
# synthetic rain


@dataclass
class RainParams:
    """Ranges for the additive streak generator.

    Angles are measured from the vertical axis, in degrees.
    """

    streak_count: int = 60
    length_px: tuple[int, int] = (8, 24)
    width_px: tuple[int, int] = (1, 2)
    angle_deg: tuple[float, float] = (-20.0, 20.0)
    intensity: tuple[float, float] = (0.2, 0.6)
    veiling_strength: float = 0.0
    allow_overlap: bool = True

    def __post_init__(self):
        self.length_px = tuple(self.length_px)
        self.width_px = tuple(self.width_px)
        self.angle_deg = tuple(self.angle_deg)
        self.intensity = tuple(self.intensity)
        self.validate()

    def validate(self) -> None:
        if self.streak_count < 0:
            raise ParameterError("streak_count must be >= 0")
        for name in ("length_px", "width_px", "angle_deg", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name}: minimum {lo} exceeds maximum {hi}")
        if self.length_px[0] < 1 or self.width_px[0] < 1:
            raise ParameterError("streak length and width must be >= 1 pixel")
        if not (0 < self.intensity[0] and self.intensity[1] <= 1):
            raise ParameterError("streak intensity must lie in (0, 1]")
        if not 0 <= self.veiling_strength < 1:
            raise ParameterError("veiling_strength must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _segment_distance(ys, xs, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    seg2 = dy * dy + dx * dx
    t = ((ys - y0) * dy + (xs - x0) * dx) / seg2 if seg2 > 0 else np.zeros_like(ys)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(ys - (y0 + t * dy), xs - (x0 + t * dx))


def render_streak(shape, center, length, width, angle_deg, intensity):
    """Rasterize one anti-aliased streak with a Gaussian cross profile.

    Returns ``(values, support)`` as full-size ``(H, W)`` arrays.
    """
    h, w = shape
    cy, cx = center
    theta = math.radians(angle_deg)
    hy, hx = 0.5 * length * math.cos(theta), 0.5 * length * math.sin(theta)
    y0, x0, y1, x1 = cy - hy, cx - hx, cy + hy, cx + hx
    sigma = 0.5 * width
    radius = max(0.75, 0.5 * width + 0.5)
    top = max(0, int(math.floor(min(y0, y1) - radius)))
    bottom = min(h, int(math.ceil(max(y0, y1) + radius)) + 1)
    left = max(0, int(math.floor(min(x0, x1) - radius)))
    right = min(w, int(math.ceil(max(x0, x1) + radius)) + 1)
    values = np.zeros((h, w))
    support = np.zeros((h, w), dtype=bool)
    if top >= bottom or left >= right:
        return values, support
    ys, xs = np.mgrid[top:bottom, left:right].astype(np.float64)
    d = _segment_distance(ys, xs, y0, x0, y1, x1)
    inside = d <= radius
    values[top:bottom, left:right] = np.where(inside, intensity * np.exp(-d * d / (2 * sigma * sigma)), 0.0)
    support[top:bottom, left:right] = inside
    return values, support


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    padded = np.pad(mask, 1)
    h, w = mask.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def synth_rain(clean: np.ndarray, params: RainParams, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Compose ``rainy = clip(clean + rain)`` with a generated rain layer."""
    clean = as_image(clean)
    params.validate()
    rng = np.random.default_rng(rng_seed)
    h, w, c = clean.shape
    streaks = np.zeros((h, w))
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(params.streak_count):
        for _attempt in range(200):
            length = int(rng.integers(params.length_px[0], params.length_px[1] + 1))
            width = int(rng.integers(params.width_px[0], params.width_px[1] + 1))
            angle = float(rng.uniform(*params.angle_deg))
            intensity = float(rng.uniform(*params.intensity))
            center = (float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1)))
            values, support = render_streak((h, w), center, length, width, angle, intensity)
            if not support.any():
                continue
            if params.allow_overlap or not (_dilate(support) & occupied).any():
                break
        else:
            raise ParameterError("could not place non-overlapping streaks; lower streak_count")
        streaks = np.maximum(streaks, values)
        occupied |= support
    rain = np.clip(streaks + params.veiling_strength, 0.0, 1.0)
    rain = np.repeat(rain[:, :, None], c, axis=2)
    rainy = np.clip(clean + rain, 0.0, 1.0)
    return rainy, rain


def make_clean_image(size: int, rng_seed: int, channels: int = 3) -> np.ndarray:
    """Procedural clean scene: smooth shading, flat shapes with hard edges, and texture."""
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.15, 0.5, channels)
    slope = rng.uniform(-0.2, 0.2, (2, channels))
    img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.65, channels)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[mask] = color
    freq = rng.uniform(6, 16, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = 0.06 * np.sin(2 * np.pi * freq[0] * yy + phase[0]) * np.sin(2 * np.pi * freq[1] * xx + phase[1])
    img = img + texture[..., None] + rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


def write_synth_dataset(out_dir, count: int, params: RainParams, seed: int,
                        size: int = 128, channels: int = 3) -> Path:
    """Write ``clean/``, ``rainy/``, ``rain/`` triplets plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        for sub in ("clean", "rainy", "rain"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create dataset directory {out}: {exc}") from exc
    seeds = np.random.SeedSequence(seed).generate_state(2 * count) if count else []
    for i in range(count):
        clean = make_clean_image(size, int(seeds[2 * i]), channels)
        rainy, rain = synth_rain(clean, params, int(seeds[2 * i + 1]))
        name = f"{i:04d}.png"
        save_image(clean, out / "clean" / name)
        save_image(rainy, out / "rainy" / name)
        save_image(rain, out / "rain" / name)
    manifest = {"count": count, "seed": seed, "size": size, "channels": channels,
                "rain_params": params.to_dict()}
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise DataIOError(f"cannot write manifest in {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# datasets


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"dataset directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images in {directory}")
    return files


def dataset_iter(directory, crop: int, downsample_factor: int, rng_seed: int,
                 cycle: bool = False) -> Iterator[np.ndarray]:
    """Yield downsampled, randomly cropped images in a shuffled order.

    One pass visits every image once; with ``cycle`` the passes repeat forever
    with a fresh shuffle each time.
    """
    files = list_images(directory)
    rng = np.random.default_rng(rng_seed)
    while True:
        for idx in rng.permutation(len(files)):
            img = downsample(load_image(files[idx]), downsample_factor)
            yield random_crop(img, crop, int(rng.integers(2**31)))
        if not cycle:
            return


class SynthDataset:
    """In-memory view of a directory written by :func:`write_synth_dataset`.

    ``clean`` and ``rain`` may be absent for purely unpaired rainy data.
    """

    def __init__(self, root, downsample_factor: int = 1):
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"dataset directory not found: {root}")
        rainy_files = list_images(root / "rainy") if (root / "rainy").is_dir() else list_images(root)
        self.names = [p.name for p in rainy_files]
        self.rainy = [downsample(load_image(p), downsample_factor) for p in rainy_files]
        self.clean = self._optional(root / "clean", downsample_factor)
        self.rain = self._optional(root / "rain", downsample_factor)

    def _optional(self, directory: Path, factor: int):
        if not directory.is_dir():
            return None
        files = [directory / n for n in self.names]
        if not all(f.is_file() for f in files):
            return None
        return [downsample(load_image(f), factor) for f in files]

    @property
    def paired(self) -> bool:
        return self.clean is not None and self.rain is not None

    def __len__(self) -> int:
        return len(self.rainy)

    def batches(self, batch_size: int, crop: int, rng_seed: int) -> Iterator[dict]:
        """Endless stream of aligned random crops.

        Each batch holds ``rainy`` and, when available, the matching ``clean``
        and ``rain`` crops, plus ``real`` clean crops drawn from an independent
        permutation so the adversarial target stays unpaired. ``epoch`` counts
        completed passes over the rainy images.
        """
        rng = np.random.default_rng(rng_seed)
        order: list[int] = []
        real_order: list[int] = []
        epoch = -1
        while True:
            batch: dict[str, list] = {"rainy": [], "clean": [], "rain": [], "real": []}
            for _ in range(batch_size):
                if not order:
                    order = list(rng.permutation(len(self)))
                    real_order = list(rng.permutation(len(self)))
                    epoch += 1
                idx, ridx = int(order.pop()), int(real_order.pop())
                top, left = crop_window(self.rainy[idx].shape, crop, int(rng.integers(2**31)))
                win = np.s_[top:top + crop, left:left + crop]
                batch["rainy"].append(self.rainy[idx][win])
                if self.paired:
                    batch["clean"].append(self.clean[idx][win])
                    batch["rain"].append(self.rain[idx][win])
                    rt, rl = crop_window(self.clean[ridx].shape, crop, int(rng.integers(2**31)))
                    batch["real"].append(self.clean[ridx][rt:rt + crop, rl:rl + crop])
            out = {k: np.stack(v) if v else None for k, v in batch.items()}
            out["epoch"] = epoch
            yield out


def env_cache_dir() -> Path | None:
    value = os.environ.get("ANLCL_CACHE")
    return Path(value) if value else None
