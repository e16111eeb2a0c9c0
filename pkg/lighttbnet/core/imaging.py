"""Image decoding, CLAHE, resizing, augmentation and normalisation.

Images are 2-D numpy arrays (height, width): uint8 in [0, 255] for storage
and CLAHE, float32 in [0, 1] while working (resize output, augmentation).
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple
import math
import os

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, ImageError
from .utils import logger

NORMALIZE_STD_FLOOR = 1e-7


@dataclass(frozen=True)
class ClaheConfig:
    """CLAHE settings; clip_limit is a multiple of the uniform bin height."""
    tile_grid: Tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        object.__setattr__(self, "tile_grid", tuple(int(t) for t in self.tile_grid))

    def validate(self) -> "ClaheConfig":
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ConfigError(f"tile_grid must be two positive ints, got {self.tile_grid}")
        if not self.clip_limit >= 1:
            raise ConfigError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if self.bins != 256:
            raise ConfigError(f"only 256 bins are supported for 8-bit images, got {self.bins}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"tile_grid": list(self.tile_grid), "clip_limit": self.clip_limit, "bins": self.bins}


@dataclass(frozen=True)
class AugmentConfig:
    """Training augmentation ranges."""
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    shift_frac: float = 0.10
    scale_frac: float = 0.10

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        for name in ("rotation_deg", "shift_frac", "scale_frac"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.scale_frac >= 1:
            raise ConfigError(f"scale_frac must be < 1, got {self.scale_frac}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class PreprocessConfig:
    """Deterministic preprocessing applied to every image."""
    image_size: int = 256
    clahe: ClaheConfig = ClaheConfig()
    clahe_after_resize: bool = False

    def validate(self) -> "PreprocessConfig":
        if self.image_size < 2:
            raise ConfigError(f"image_size must be >= 2, got {self.image_size}")
        self.clahe.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"image_size": self.image_size, "clahe": self.clahe.to_dict(),
                "clahe_after_resize": self.clahe_after_resize}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PreprocessConfig":
        clahe = ClaheConfig(**data.get("clahe", {}))
        return cls(image_size=int(data.get("image_size", 256)), clahe=clahe,
                   clahe_after_resize=bool(data.get("clahe_after_resize", False)))


@dataclass(frozen=True)
class AffineParams:
    """One augmentation draw."""
    flip: bool = False
    rotation_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    scale: float = 1.0


# -- decoding -----------------------------------------------------------------------

def load_image(path: os.PathLike) -> np.ndarray:
    """
    Read an 8-bit grayscale image (PNG, PGM P5 or anything Pillow decodes).

    16-bit images are rescaled to 8 bits; colour images are converted by
    averaging their RGB channels.
    """
    try:
        with PILImage.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "L":
                pixels = np.asarray(img, dtype=np.uint8)
            elif mode in ("I;16", "I;16B", "I;16L", "I"):
                raw = np.asarray(img, dtype=np.float64)
                peak = 65535.0 if mode.startswith("I;16") or raw.max() > 255 else 255.0
                pixels = np.clip(np.floor(raw * 255.0 / peak + 0.5), 0, 255).astype(np.uint8)
            else:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                pixels = np.floor(rgb.mean(axis=2) + 0.5).astype(np.uint8)
    except (OSError, ValueError) as e:
        raise ImageError(f"cannot read image {path}: {e}", {"path": str(path)})
    if pixels.size == 0:
        raise ImageError(f"image {path} is empty", {"path": str(path)})
    logger.debug(f"Loaded {path} mode={mode} size={pixels.shape[1]}x{pixels.shape[0]}")
    return pixels


def save_gray_png(pixels: np.ndarray, path: os.PathLike) -> None:
    """Write a uint8 (or [0,1] float) grayscale array as PNG."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# -- CLAHE ----------------------------------------------------------------------------

def _clip_histogram(hist: np.ndarray, clip: int) -> np.ndarray:
    """
    Clip bins at `clip` and hand the excess back without pushing any bin
    above the limit: first a uniform share capped per bin, then single
    counts spread over the bins that still have room.
    """
    hist = hist.astype(np.int64)
    excess = int(np.maximum(hist - clip, 0).sum())
    if excess == 0:
        return hist
    hist = np.minimum(hist, clip)
    bins = hist.size

    share = excess // bins
    if share:
        added = np.minimum(clip - hist, share)
        hist += added
        excess -= int(added.sum())

    while excess > 0:
        room = np.flatnonzero(hist < clip)
        if room.size == 0:
            break
        step = max(1, room.size // excess)
        chosen = room[::step][:excess]
        hist[chosen] += 1
        excess -= chosen.size
    return hist


def _tile_lut(tile: np.ndarray, clip_limit: float, bins: int) -> np.ndarray:
    n = tile.size
    hist = np.bincount(tile.reshape(-1), minlength=bins)
    if math.isfinite(clip_limit):
        clip = max(1, int(math.ceil(clip_limit * n / bins)))
        hist = _clip_histogram(hist, clip)
    cdf = np.cumsum(hist)
    return np.floor(cdf * ((bins - 1) / n) + 0.5)


def _interp_axis(length: int, tile: int, grid: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbouring tile indices and weights for pixel centres along one axis."""
    pos = (np.arange(length) + 0.5) / tile - 0.5
    base = np.floor(pos)
    weight = pos - base
    lo = np.clip(base, 0, grid - 1).astype(np.int64)
    hi = np.clip(base + 1, 0, grid - 1).astype(np.int64)
    return lo, hi, weight


def clahe(image: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """
    Contrast Limited Adaptive Histogram Equalization of a uint8 image.

    Each tile's histogram is clipped at ceil(clip_limit * tile_pixels / bins),
    equalised into a lookup table, and pixels blend the tables of the four
    nearest tile centres bilinearly. Images whose size is not a multiple of
    the grid are reflection-padded at the bottom/right for tiling.
    """
    cfg.validate()
    pixels = np.asarray(image)
    if pixels.ndim != 2 or pixels.size == 0:
        raise ImageError(f"clahe needs a non-empty 2-D image, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        pixels = to_uint8(pixels) if pixels.dtype.kind == "f" else np.clip(pixels, 0, 255).astype(np.uint8)
    H, W = pixels.shape
    gy, gx = cfg.tile_grid
    if H < gy or W < gx:
        raise ImageError(f"image {W}x{H} is smaller than the {gx}x{gy} tile grid")

    th, tw = math.ceil(H / gy), math.ceil(W / gx)
    pad_h, pad_w = th * gy - H, tw * gx - W
    padded = np.pad(pixels, ((0, pad_h), (0, pad_w)), mode="reflect") if (pad_h or pad_w) else pixels

    luts = np.empty((gy, gx, cfg.bins), dtype=np.float64)
    for ty in range(gy):
        for tx in range(gx):
            tile = padded[ty * th:(ty + 1) * th, tx * tw:(tx + 1) * tw]
            luts[ty, tx] = _tile_lut(tile, cfg.clip_limit, cfg.bins)

    y0, y1, wy = _interp_axis(H, th, gy)
    x0, x1, wx = _interp_axis(W, tw, gx)
    wy = wy[:, None]
    wx = wx[None, :]
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    top = luts[Y0, X0, pixels] * (1.0 - wx) + luts[Y0, X1, pixels] * wx
    bottom = luts[Y1, X0, pixels] * (1.0 - wx) + luts[Y1, X1, pixels] * wx
    out = top * (1.0 - wy) + bottom * wy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# -- resizing -----------------------------------------------------------------------

def _resize_weights(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align_corners=False: source coordinate of destination pixel centre
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, target: Tuple[int, int] = (256, 256)) -> np.ndarray:
    """
    Bilinear resize to (height, width), align-corners=False convention.

    Source coordinates are clamped to the image, so edges replicate.
    Returns float32 in the input's value range.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ImageError(f"resize needs a non-empty 2-D image, got shape {img.shape}")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ImageError(f"invalid resize target {target}")
    if img.shape == (th, tw):
        return img.astype(np.float32)
    y0, y1, wy = _resize_weights(img.shape[0], th)
    x0, x1, wx = _resize_weights(img.shape[1], tw)
    rows = img[y0] * (1.0 - wy[:, None]) + img[y1] * wy[:, None]
    out = rows[:, x0] * (1.0 - wx[None, :]) + rows[:, x1] * wx[None, :]
    return out.astype(np.float32)


class Preprocessor:
    """
    Deterministic per-image pipeline: CLAHE at native resolution, bilinear
    resize, scaling to [0, 1]. `clahe_after_resize` swaps the first two steps.
    """

    def __init__(self, config: PreprocessConfig = PreprocessConfig()):
        self.config = config.validate()

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        size = (self.config.image_size, self.config.image_size)
        if self.config.clahe_after_resize:
            small = to_uint8(resize_bilinear(pixels, size) / 255.0)
            return to_float(clahe(small, self.config.clahe))
        enhanced = clahe(pixels, self.config.clahe)
        return (resize_bilinear(enhanced, size) / np.float32(255.0)).astype(np.float32)

    def load(self, path: os.PathLike) -> np.ndarray:
        return self(load_image(path))


# -- augmentation ---------------------------------------------------------------------

def draw_augment_params(cfg: AugmentConfig, rng: np.random.Generator) -> AffineParams:
    """Draw flip, rotation, shift and scale in that order from `rng`."""
    flip = bool(rng.random() < cfg.flip_prob)
    rotation = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shift_x = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac))
    shift_y = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac))
    scale = 1.0 + float(rng.uniform(-cfg.scale_frac, cfg.scale_frac))
    return AffineParams(flip, rotation, shift_x, shift_y, scale)


def _sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float coordinates; outside the image reads as zero."""
    H, W = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            values = np.where(inside, img[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)], 0.0)
            out += values * (wy * wx)
    return out


def apply_affine(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """
    Apply flip -> rotate -> shift -> scale (about the image centre) as a
    single inverse-mapped bilinear resample with zero fill.

    Positive rotation turns the image counter-clockwise as displayed; shifts
    are fractions of width/height, positive to the right/down.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")

    # Undo scale, then shift
    dx = (xs - cx) / params.scale - params.shift_x * W
    dy = (ys - cy) / params.scale - params.shift_y * H
    # Undo rotation: forward map is [dx', dy'] = [[c, s], [-s, c]] [dx, dy]
    theta = math.radians(params.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    src_dx = c * dx - s * dy
    src_dy = s * dx + c * dy
    if params.flip:
        src_dx = -src_dx
    out = _sample_bilinear(img, src_dx + cx, src_dy + cy)
    return out.astype(np.float32)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one set of affine parameters from `rng` and apply it."""
    return apply_affine(image, draw_augment_params(cfg, rng))


# -- normalisation --------------------------------------------------------------------

def normalize(batch: np.ndarray) -> np.ndarray:
    """
    Per-image standardisation (x - mean) / max(std, 1e-7).

    Accepts one image [H, W] or a batch [B, H, W] / [B, 1, H, W];
    statistics are taken over each image's pixels.
    """
    arr = np.asarray(batch, dtype=np.float64)
    if arr.size == 0:
        raise ImageError("normalize needs a non-empty image")
    if arr.ndim == 2:
        flat = arr.reshape(1, -1)
    else:
        flat = arr.reshape(arr.shape[0], -1)
    mu = flat.mean(axis=1, keepdims=True)
    sd = np.maximum(flat.std(axis=1, keepdims=True), NORMALIZE_STD_FLOOR)
    return ((flat - mu) / sd).reshape(arr.shape).astype(np.float32)
