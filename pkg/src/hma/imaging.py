"""Image types, color conversion, bicubic degradation, Y-channel quality
metrics, patch extraction, and geometric augmentation.

The resize follows the MATLAB imresize convention: separable cubic kernel
with a = -0.5, half-pixel symmetric coordinate mapping, edge clamping,
per-output weight renormalization, and a kernel stretched by the scale
factor when antialiasing a downscale.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import image_io
from .errors import ImageError, ShapeError


@dataclass
class ImageU8:
    """8-bit image, (H, W, C) with C in {1, 3}, row-major interleaved."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ImageError(f"ImageU8 needs (H, W, 1|3) uint8, got {self.data.shape} {self.data.dtype}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_f32(self) -> "ImageF32":
        return ImageF32(self.data.astype(np.float32) / 255.0)


@dataclass
class ImageF32:
    """Float image with samples nominally in [0, 1]; clamped at export."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ImageError(f"ImageF32 needs (H, W, 1|3) float, got {self.data.shape}")
        self.data = self.data.astype(np.float32, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_u8(self) -> ImageU8:
        return ImageU8(np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8))


# ----------------------------------------------------------------------------
# file I/O
# ----------------------------------------------------------------------------

def load_image(path: str) -> ImageU8:
    """Load a PNG or binary PPM file.

    Dispatch prefers magic bytes; a .png/.ppm extension routes malformed
    files to the matching decoder so its offset diagnostics surface.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ImageError(f"cannot read {path}: {e}") from e
    ext = os.path.splitext(path)[1].lower()
    if blob[:8] == image_io.PNG_SIGNATURE or ext == ".png":
        return ImageU8(image_io.decode_png(blob))
    if blob[:2] == b"P6" or ext == ".ppm":
        return ImageU8(image_io.decode_ppm(blob))
    raise ImageError(f"{path}: unsupported format (expected PNG or binary PPM)")


def save_image(img: ImageU8, path: str) -> None:
    """Write PNG (default) or PPM by extension, atomically."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        payload = image_io.encode_ppm(img.data)
    else:
        payload = image_io.encode_png(img.data)
    image_io.write_atomic(path, payload)


# ----------------------------------------------------------------------------
# color
# ----------------------------------------------------------------------------

def rgb_to_y(img: ImageF32) -> ImageF32:
    """BT.601 studio-swing luma: Y = (16 + 65.481 R + 128.553 G + 24.966 B)/255."""
    if img.channels != 3:
        raise ImageError(f"rgb_to_y needs a 3-channel image, got {img.channels} channels")
    r, g, b = img.data[..., 0], img.data[..., 1], img.data[..., 2]
    y = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    return ImageF32(y[..., None].astype(np.float32))


# ----------------------------------------------------------------------------
# bicubic resize
# ----------------------------------------------------------------------------

def _cubic(t: np.ndarray) -> np.ndarray:
    # Keys kernel with a = -0.5
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    return np.where(t <= 1.0, 1.5 * t3 - 2.5 * t2 + 1.0,
                    np.where(t < 2.0, -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0, 0.0))


def bicubic_contributions(in_len: int, out_len: int, antialias: bool):
    """Per-output-sample source indices and normalized weights for one axis."""
    scale = out_len / in_len
    if antialias and scale < 1.0:
        kscale = scale
    else:
        kscale = 1.0
    kernel_width = 4.0 / kscale
    u = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - kernel_width / 2.0).astype(np.int64)
    p = int(math.ceil(kernel_width)) + 2
    idx = left[:, None] + np.arange(p)
    weights = _cubic((u[:, None] - idx) * kscale) * kscale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    return idx, weights


def _resize_axis(arr: np.ndarray, out_len: int, antialias: bool) -> np.ndarray:
    idx, weights = bicubic_contributions(arr.shape[0], out_len, antialias)
    taken = arr[idx]  # (out_len, P, ...)
    w = weights.reshape(weights.shape + (1,) * (arr.ndim - 1))
    return (taken * w).sum(axis=1)


def resize_array(arr: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ImageError(f"resize target must be positive, got {out_h}x{out_w}")
    work = arr.astype(np.float64)
    work = _resize_axis(work, out_h, antialias)
    work = _resize_axis(work.transpose(1, 0, 2), out_w, antialias).transpose(1, 0, 2)
    return work.astype(np.float32)


def bicubic_resize(img: ImageF32, out_h: int, out_w: int, antialias: bool = True) -> ImageF32:
    return ImageF32(resize_array(img.data, out_h, out_w, antialias))


@dataclass
class DegradationSpec:
    """Bicubic degradation settings; antialias matches the downsampling default."""

    scale: int
    antialias: bool = True

    def __post_init__(self):
        if self.scale < 2:
            raise ImageError(f"degradation scale must be >= 2, got {self.scale}")


def modcrop(img: ImageF32, multiple: int) -> ImageF32:
    h = img.height - img.height % multiple
    w = img.width - img.width % multiple
    return ImageF32(img.data[:h, :w])


def degrade(img: ImageF32, spec: DegradationSpec) -> ImageF32:
    """Bicubic downscale; output dims are ceil(H/s) x ceil(W/s)."""
    oh = math.ceil(img.height / spec.scale)
    ow = math.ceil(img.width / spec.scale)
    return bicubic_resize(img, oh, ow, spec.antialias)


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def _to_y_plane(img: ImageF32) -> np.ndarray:
    if img.channels == 3:
        return rgb_to_y(img).data[..., 0]
    return img.data[..., 0]


def _check_pair(a: ImageF32, b: ImageF32, crop: int):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"metric inputs differ in geometry: {a.data.shape} vs {b.data.shape}")
    if crop < 0:
        raise ShapeError(f"crop must be >= 0, got {crop}")
    if a.height <= 2 * crop or a.width <= 2 * crop:
        raise ShapeError(f"crop {crop} leaves no pixels of a {a.height}x{a.width} image")


def psnr_y(a: ImageF32, b: ImageF32, crop: int = 0) -> float:
    """Peak signal-to-noise ratio in dB on the luma plane; inf for identical inputs."""
    _check_pair(a, b, crop)
    ya = _to_y_plane(a)
    yb = _to_y_plane(b)
    if crop:
        ya = ya[crop:-crop, crop:-crop]
        yb = yb[crop:-crop, crop:-crop]
    mse = float(np.mean((ya.astype(np.float64) - yb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with a 1-D kernel applied to both axes
    from numpy.lib.stride_tricks import sliding_window_view

    size = k.size
    x = sliding_window_view(x, size, axis=0) @ k
    x = sliding_window_view(x, size, axis=1) @ k
    return x


def ssim_y(a: ImageF32, b: ImageF32, crop: int = 0) -> float:
    """Mean structural similarity on the luma plane, 11x11 Gaussian window."""
    _check_pair(a, b, crop)
    ya = _to_y_plane(a).astype(np.float64)
    yb = _to_y_plane(b).astype(np.float64)
    if crop:
        ya = ya[crop:-crop, crop:-crop]
        yb = yb[crop:-crop, crop:-crop]
    if ya.shape[0] < 11 or ya.shape[1] < 11:
        raise ShapeError(f"ssim needs at least 11x11 pixels after crop, got {ya.shape}")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    k = _gaussian_kernel()
    mu_a = _filter_valid(ya, k)
    mu_b = _filter_valid(yb, k)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = _filter_valid(ya * ya, k) - mu_aa
    var_b = _filter_valid(yb * yb, k) - mu_bb
    cov = _filter_valid(ya * yb, k) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------------
# patches and augmentation
# ----------------------------------------------------------------------------

def extract_patches(hr: ImageF32, lr: ImageF32, patch_lr: int, count: int,
                    rng_seed: int) -> list[tuple[ImageF32, ImageF32]]:
    """Aligned random LR/HR crops; the HR patch is scale x the LR patch."""
    if hr.height % lr.height or hr.width % lr.width:
        raise ShapeError(f"HR {hr.height}x{hr.width} is not an integer multiple of LR {lr.height}x{lr.width}")
    scale = hr.height // lr.height
    if hr.width // lr.width != scale:
        raise ShapeError("HR/LR scale differs between axes")
    if patch_lr > lr.height or patch_lr > lr.width:
        raise ShapeError(f"patch {patch_lr} exceeds LR image {lr.height}x{lr.width}")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for _ in range(count):
        top = int(rng.integers(0, lr.height - patch_lr + 1))
        left = int(rng.integers(0, lr.width - patch_lr + 1))
        lr_patch = ImageF32(lr.data[top:top + patch_lr, left:left + patch_lr].copy())
        hr_patch = ImageF32(hr.data[top * scale:(top + patch_lr) * scale,
                                    left * scale:(left + patch_lr) * scale].copy())
        pairs.append((lr_patch, hr_patch))
    return pairs


def _transform(arr: np.ndarray, flip: bool, rot90: int) -> np.ndarray:
    if flip:
        arr = arr[:, ::-1]
    if rot90:
        arr = np.rot90(arr, rot90, axes=(0, 1))
    return np.ascontiguousarray(arr)


def augment(pair: tuple[ImageF32, ImageF32], flip: bool, rot90: int) -> tuple[ImageF32, ImageF32]:
    """Apply the same horizontal flip / quarter rotation to both patches."""
    if rot90 not in (0, 1, 2, 3):
        raise ShapeError(f"rot90 must be in {{0,1,2,3}}, got {rot90}")
    lr, hr = pair
    return (ImageF32(_transform(lr.data, flip, rot90)),
            ImageF32(_transform(hr.data, flip, rot90)))
