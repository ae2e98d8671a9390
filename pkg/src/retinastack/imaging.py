"""Image geometry, intensity normalization and augmentation.

Images are ``(H, W, 3)`` float arrays with values in ``[0, 1]`` until
normalization. Every function is pure; randomness only enters through the
seed passed to :func:`sample_augment_params`.

Color formulas (all values in ``[0, 1]``):

* brightness: ``x + delta``
* contrast: ``(x - mean_c) * factor + mean_c`` with ``mean_c`` the per-channel
  image mean
* saturation / hue: hexcone HSV; ``s * factor`` and ``(h + delta) mod 1``

Each color op clips its result to ``[0, 1]``. Neutral parameters skip the op,
so identity parameters reproduce the input bit for bit.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FENS_MAGIC = b"FENS"


@dataclass(frozen=True)
class CameraProfile:
    native_width: int
    native_height: int
    crop_size: int

    def __post_init__(self):
        if self.crop_size > max(self.native_width, self.native_height):
            raise ValueError("crop_size exceeds the padded native size")


@dataclass(frozen=True)
class ArchPreset:
    name: str
    input_size: int

    def __post_init__(self):
        if self.input_size <= 0:
            raise ValueError("input_size must be positive")


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization stats need 3 channels")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be > 0")


IMAGENET_STATS = NormalizationStats()

# keyed by (width, height)
CAMERA_PROFILES: dict[tuple[int, int], CameraProfile] = {
    (4288, 2848): CameraProfile(4288, 2848, 3464),
    (2048, 1536): CameraProfile(2048, 1536, 1536),
    (2144, 1424): CameraProfile(2144, 1424, 1424),
}

ARCH_INPUT_SIZES = {
    "efficientnetb4": 380,
    "inceptionv3": 299,
    "densenet201": 224,
    "resnet152": 224,
}


def arch_preset(name: str, literal_244: bool = False) -> ArchPreset:
    """Input-size preset for a backbone name.

    ``literal_244`` replaces the conventional 224 input size with 244.
    """
    key = name.lower()
    if key not in ARCH_INPUT_SIZES:
        raise KeyError(f"unknown architecture {name!r}")
    size = ARCH_INPUT_SIZES[key]
    if size == 224 and literal_244:
        size = 244
    return ArchPreset(key, size)


def camera_profile_for(width: int, height: int) -> CameraProfile | None:
    return CAMERA_PROFILES.get((int(width), int(height)))


def _check(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    return img


def square_pad(img, fill: float = 0.0) -> np.ndarray:
    img = _check(img)
    h, w, _ = img.shape
    side = max(h, w)
    if h == w:
        return img.copy()
    out = np.full((side, side, 3), fill, dtype=img.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def center_crop(img, size: int) -> np.ndarray:
    img = _check(img)
    h, w, _ = img.shape
    if size <= 0 or size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image dimensions {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top:top + size, left:left + size].copy()


def _pad_crop(img: np.ndarray, crop: int, fill: float) -> np.ndarray:
    """``center_crop(square_pad(img), crop)`` without building the padded canvas."""
    h, w, _ = img.shape
    side = max(h, w)
    if crop > side:
        raise ValueError(f"crop size {crop} exceeds padded size {side}")
    # window origin in padded coordinates, then shifted into source coordinates
    origin = (side - crop) // 2
    r0 = origin - (side - h) // 2
    c0 = origin - (side - w) // 2
    out = np.full((crop, crop, 3), fill, dtype=img.dtype)
    rs, re = max(r0, 0), min(r0 + crop, h)
    cs, ce = max(c0, 0), min(c0 + crop, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = img[rs:re, cs:ce]
    return out


def _linear_taps(n_in: int, n_out: int):
    # half-pixel centers, edge samples clamp to the border
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(img, size) -> np.ndarray:
    img = _check(img)
    out_h, out_w = (size, size) if np.isscalar(size) else size
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    h, w, _ = img.shape
    i0, i1, t = _linear_taps(h, out_h)
    t = t.astype(img.dtype)[:, None, None]
    a, b = img[i0], img[i1]
    rows = a + t * (b - a)
    j0, j1, u = _linear_taps(w, out_w)
    u = u.astype(img.dtype)[None, :, None]
    a, b = rows[:, j0], rows[:, j1]
    return a + u * (b - a)


def normalize_zscore(img, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    img = _check(img)
    mean = np.asarray(stats.mean, dtype=img.dtype)
    std = np.asarray(stats.std, dtype=img.dtype)
    return (img - mean) / std


def denormalize_zscore(img, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    img = _check(img)
    return img * np.asarray(stats.std, dtype=img.dtype) + np.asarray(stats.mean, dtype=img.dtype)


def preprocess(
    img,
    cam: CameraProfile | None,
    arch: ArchPreset,
    stats: NormalizationStats = IMAGENET_STATS,
    fill: float = 0.0,
    strict: bool = False,
) -> np.ndarray:
    """Square pad, center crop to the camera's crop size, resize, normalize.

    ``cam=None`` means an unknown camera: the image is padded but not
    cropped. If ``cam`` is given and the image does not have the camera's
    native resolution, a warning is issued (or ``ValueError`` with
    ``strict=True``) and processing continues.
    """
    img = _check(img)
    h, w, _ = img.shape
    if cam is None:
        warnings.warn(f"no camera profile for {w}x{h}; padding without crop", stacklevel=2)
        square = _pad_crop(img, max(h, w), fill)
    else:
        if (w, h) != (cam.native_width, cam.native_height):
            msg = (f"image {w}x{h} does not match camera "
                   f"{cam.native_width}x{cam.native_height}")
            if strict:
                raise ValueError(msg)
            warnings.warn(msg, stacklevel=2)
        square = _pad_crop(img, cam.crop_size, fill)
    return normalize_zscore(resize_bilinear(square, arch.input_size), stats)


# -- augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotation: tuple[float, float] = (0.0, 360.0)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (0.9, 1.1)
    saturation: tuple[float, float] = (0.9, 1.1)
    hue: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        for name in ("rotation", "brightness", "contrast", "saturation", "hue"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        for p in (self.flip_h_prob, self.flip_v_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")
        if self.contrast[0] < 0 or self.saturation[0] < 0:
            raise ValueError("contrast and saturation factors must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((0, 0), 0.0, 0.0, (0, 0), (1, 1), (1, 1), (0, 0))


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    saturation_factor: float = 1.0
    hue_delta: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()


def sample_augment_params(rng_seed: int, config: AugmentConfig = AugmentConfig()) -> AugmentParams:
    """Draw one parameter set; a pure function of ``(rng_seed, config)``."""
    rng = np.random.default_rng(rng_seed)
    c = config
    # fixed draw order keeps parameters stable when ranges change
    rotation = rng.uniform(*c.rotation)
    flip_h = rng.random() < c.flip_h_prob
    flip_v = rng.random() < c.flip_v_prob
    brightness = rng.uniform(*c.brightness)
    contrast = rng.uniform(*c.contrast)
    saturation = rng.uniform(*c.saturation)
    hue = rng.uniform(*c.hue)
    return AugmentParams(
        float(rotation), bool(flip_h), bool(flip_v),
        float(brightness), float(contrast), float(saturation), float(hue),
    )


def rotate(img, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image center.

    Bilinear sampling; destination pixels whose source lies outside the
    image get ``fill``.
    """
    img = _check(img)
    deg = float(degrees) % 360.0
    if deg == 0.0:
        return img.copy()
    h, w, _ = img.shape
    if deg % 90.0 == 0.0:
        c, s = {90.0: (0, 1), 180.0: (-1, 0), 270.0: (0, -1)}[deg]
    else:
        rad = math.radians(deg)
        c, s = math.cos(rad), math.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sx = cx + c * dx - s * dy
    sy = cy + s * dx + c * dy

    tol = 1e-9
    inside = (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (sx - x0)[..., None]
    ty = (sy - y0)[..., None]
    top = img[y0, x0] + tx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + tx * (img[y1, x1] - img[y1, x0])
    out = top + ty * (bot - top)
    out[~inside] = fill
    return out.astype(img.dtype, copy=False)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    safe_v = np.where(v > 0, v, 1.0)
    s = np.where(v > 0, delta / safe_v, 0.0)
    safe_d = np.where(delta > 0, delta, 1.0)
    h = np.where(
        v == r, np.mod((g - b) / safe_d, 6.0),
        np.where(v == g, (b - r) / safe_d + 2.0, (r - g) / safe_d + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(np.intp) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def augment(img, p: AugmentParams, fill: float = 0.0) -> np.ndarray:
    """Rotation, then flips, then brightness, contrast, saturation, hue."""
    img = _check(img)
    if p.contrast_factor < 0 or p.saturation_factor < 0:
        raise ValueError("contrast and saturation factors must be non-negative")
    out = rotate(img, p.rotation, fill) if p.rotation % 360.0 else img.copy()
    if p.flip_h:
        out = out[:, ::-1]
    if p.flip_v:
        out = out[::-1]
    if p.brightness_delta != 0.0:
        out = np.clip(out + p.brightness_delta, 0.0, 1.0)
    if p.contrast_factor != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = np.clip((out - mean) * p.contrast_factor + mean, 0.0, 1.0)
    if p.saturation_factor != 1.0 or p.hue_delta != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        if p.saturation_factor != 1.0:
            hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation_factor, 0.0, 1.0)
        if p.hue_delta != 0.0:
            hsv[..., 0] = np.mod(hsv[..., 0] + p.hue_delta, 1.0)
        out = hsv_to_rgb(hsv).astype(img.dtype, copy=False)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


# -- file formats ---------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM into an ``(H, W, 3)`` float64 array."""
    from PIL import Image

    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM"):
            raise ValueError(f"unsupported image format {im.format!r} for {path}")
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValueError(f"unsupported pixel mode {im.mode!r} for {path}")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_image(img, path: str | Path) -> None:
    from PIL import Image

    img = _check(img)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_fens(path: str | Path, tensor) -> None:
    """Raw little-endian float32 tensor with a 16-byte ``FENS`` header."""
    t = np.asarray(tensor)
    if t.ndim != 3:
        raise ValueError("FENS tensors are (H, W, C)")
    h, w, c = t.shape
    with open(path, "wb") as fh:
        fh.write(FENS_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_fens(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FENS_MAGIC:
        raise ValueError(f"{path} is not a FENS tensor")
    h, w, c = struct.unpack("<III", raw[4:16])
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != h * w * c:
        raise ValueError(f"{path}: payload size does not match header {h}x{w}x{c}")
    return body.reshape(h, w, c).astype(np.float32)
